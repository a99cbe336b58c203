#include "efficientspeech/dsp.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>

#include "efficientspeech/errors.hpp"
#include "efficientspeech/rng.hpp"

namespace es::dsp {

namespace {

// FFTW plans are created once per size under a lock; executing them on caller-owned buffers
// through the new-array interface is thread-safe.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    static std::mutex mu;
    static std::map<std::size_t, std::pair<fftw_plan, fftw_plan>> plans;
    std::lock_guard lock(mu);
    auto it = plans.find(n);
    if (it == plans.end()) {
      auto* in = fftw_alloc_real(n);
      auto* out = fftw_alloc_complex(n / 2 + 1);
      const int size = static_cast<int>(n);
      fftw_plan fwd = fftw_plan_dft_r2c_1d(size, in, out, FFTW_ESTIMATE | FFTW_UNALIGNED);
      fftw_plan inv = fftw_plan_dft_c2r_1d(size, out, in, FFTW_ESTIMATE | FFTW_UNALIGNED);
      fftw_free(in);
      fftw_free(out);
      it = plans.emplace(n, std::make_pair(fwd, inv)).first;
    }
    fwd_ = it->second.first;
    inv_ = it->second.second;
  }

  void forward(std::vector<double>& in, std::complex<double>* out) const {
    fftw_execute_dft_r2c(fwd_, in.data(), reinterpret_cast<fftw_complex*>(out));
  }

  // Unnormalized inverse; `spec` is clobbered.
  void inverse(std::vector<std::complex<double>>& spec, std::vector<double>& out) const {
    fftw_execute_dft_c2r(inv_, reinterpret_cast<fftw_complex*>(spec.data()), out.data());
  }

  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  fftw_plan fwd_;
  fftw_plan inv_;
};

std::vector<double> reflect_pad(const std::vector<float>& x, std::size_t pad) {
  const std::size_t n = x.size();
  std::vector<double> out(n + 2 * pad);
  for (std::size_t i = 0; i < out.size(); ++i) {
    long long j = static_cast<long long>(i) - static_cast<long long>(pad);
    const long long last = static_cast<long long>(n) - 1;
    while (j < 0 || j > last) {
      if (j < 0) j = -j;
      if (j > last) j = 2 * last - j;
    }
    out[i] = x[static_cast<std::size_t>(j)];
  }
  return out;
}

// STFT over an already padded signal with frames at t * hop.
Spectrum frames_stft(const std::vector<double>& padded, std::size_t frames, const SpectrogramConfig& cfg,
                     const std::vector<double>& window) {
  RealFft fft(cfg.n_fft);
  Spectrum s;
  s.frames = frames;
  s.bins = cfg.n_bins();
  s.data.resize(frames * s.bins);
  std::vector<double> buf(cfg.n_fft);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = padded.data() + t * cfg.hop_length;
    for (std::size_t i = 0; i < cfg.n_fft; ++i) buf[i] = src[i] * window[i];
    fft.forward(buf, s.data.data() + t * s.bins);
  }
  return s;
}

}  // namespace

void SpectrogramConfig::validate() const {
  if (n_fft == 0 || hop_length == 0 || win_length == 0) throw ConfigError("STFT sizes must be positive");
  if (!(hop_length <= win_length && win_length <= n_fft)) {
    throw ConfigError("STFT sizes must satisfy hop <= win <= n_fft");
  }
  if (n_mels == 0) throw ConfigError("n_mels must be positive");
  if (!(fmin >= 0 && fmin < fmax && fmax <= static_cast<double>(sample_rate) / 2)) {
    throw ConfigError("mel range must satisfy 0 <= fmin < fmax <= sample_rate/2");
  }
  if (!(log_floor > 0)) throw ConfigError("log floor must be positive");
}

void SpectrogramConfig::write(KeyValues& kv) const {
  kv.set("dsp.sample_rate", sample_rate);
  kv.set("dsp.n_fft", n_fft);
  kv.set("dsp.win_length", win_length);
  kv.set("dsp.hop_length", hop_length);
  kv.set("dsp.n_mels", n_mels);
  kv.set("dsp.fmin", fmin);
  kv.set("dsp.fmax", fmax);
  kv.set("dsp.log_floor", log_floor);
}

SpectrogramConfig SpectrogramConfig::read(const KeyValues& kv) {
  SpectrogramConfig c;
  c.sample_rate = kv.get_size("dsp.sample_rate");
  c.n_fft = kv.get_size("dsp.n_fft");
  c.win_length = kv.get_size("dsp.win_length");
  c.hop_length = kv.get_size("dsp.hop_length");
  c.n_mels = kv.get_size("dsp.n_mels");
  c.fmin = kv.get_double("dsp.fmin");
  c.fmax = kv.get_double("dsp.fmax");
  c.log_floor = kv.get_double("dsp.log_floor");
  c.validate();
  return c;
}

Tensor<double> Spectrum::magnitude() const {
  Tensor<double> m({frames, bins});
  for (std::size_t i = 0; i < data.size(); ++i) m[i] = std::abs(data[i]);
  return m;
}

std::vector<double> analysis_window(const SpectrogramConfig& cfg) {
  std::vector<double> w(cfg.n_fft, 0.0);
  const std::size_t offset = (cfg.n_fft - cfg.win_length) / 2;
  for (std::size_t i = 0; i < cfg.win_length; ++i) {
    w[offset + i] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(i) /
                                         static_cast<double>(cfg.win_length));
  }
  return w;
}

std::size_t num_frames(std::size_t num_samples, const SpectrogramConfig& cfg) {
  if (num_samples < cfg.win_length) {
    throw SequenceTooShortError("signal of " + std::to_string(num_samples) + " samples is shorter than the " +
                                std::to_string(cfg.win_length) + "-sample window");
  }
  return 1 + num_samples / cfg.hop_length;
}

Spectrum stft(const Waveform& wave, const SpectrogramConfig& cfg) {
  cfg.validate();
  const std::size_t m = num_frames(wave.samples.size(), cfg);
  return frames_stft(reflect_pad(wave.samples, cfg.n_fft / 2), m, cfg, analysis_window(cfg));
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_center_frequencies(const SpectrogramConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> f(cfg.n_mels);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    f[m] = mel_to_hz(lo + (hi - lo) * static_cast<double>(m + 1) / static_cast<double>(cfg.n_mels + 1));
  }
  return f;
}

Tensor<double> mel_filterbank(const SpectrogramConfig& cfg) {
  cfg.validate();
  const std::size_t bins = cfg.n_bins();
  std::vector<double> edges(cfg.n_mels + 2);
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  }
  Tensor<double> fb({cfg.n_mels, bins}, 0.0);
  const double bin_hz = static_cast<double>(cfg.sample_rate) / static_cast<double>(cfg.n_fft);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    double sum = 0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0;
      if (f > left && f <= center) w = (f - left) / (center - left);
      else if (f > center && f < right) w = (right - f) / (right - center);
      fb(m, k) = w;
      sum += w;
    }
    if (sum > 0) {
      for (std::size_t k = 0; k < bins; ++k) fb(m, k) /= sum;
    }
  }
  return fb;
}

MelSpectrogram mel_from_magnitude(const Tensor<double>& magnitude, const SpectrogramConfig& cfg) {
  const Tensor<double> fb = mel_filterbank(cfg);
  const std::size_t frames = magnitude.rows(), bins = magnitude.cols();
  if (bins != cfg.n_bins()) throw ShapeError("magnitude has " + std::to_string(bins) + " bins, expected " +
                                             std::to_string(cfg.n_bins()));
  MelSpectrogram mel;
  mel.hop_length = cfg.hop_length;
  mel.sample_rate = cfg.sample_rate;
  mel.frames = Tensor<float>({frames, cfg.n_mels});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double acc = 0;
      for (std::size_t k = 0; k < bins; ++k) acc += fb(m, k) * magnitude(t, k);
      mel.frames(t, m) = static_cast<float>(std::log(std::max(acc, cfg.log_floor)));
    }
  }
  return mel;
}

MelSpectrogram mel_spectrogram(const Waveform& wave, const SpectrogramConfig& cfg) {
  return mel_from_magnitude(stft(wave, cfg).magnitude(), cfg);
}

std::vector<double> frame_energy(const Waveform& wave, const SpectrogramConfig& cfg) {
  const Spectrum s = stft(wave, cfg);
  std::vector<double> e(s.frames);
  for (std::size_t t = 0; t < s.frames; ++t) {
    double acc = 0;
    for (std::size_t k = 0; k < s.bins; ++k) acc += std::norm(s(t, k));
    e[t] = std::sqrt(acc);
  }
  return e;
}

std::vector<double> estimate_f0(const Waveform& wave, const SpectrogramConfig& cfg, const F0Options& opt) {
  const std::size_t m = num_frames(wave.samples.size(), cfg);
  const double sr = static_cast<double>(wave.sample_rate);
  const std::size_t w = opt.window;
  const auto min_lag = static_cast<std::size_t>(std::floor(sr / opt.max_hz));
  const auto max_lag = static_cast<std::size_t>(std::ceil(sr / opt.min_hz));
  if (max_lag + 2 >= w) throw ConfigError("F0 window too short for the lowest pitch");
  const std::vector<double> padded = reflect_pad(wave.samples, w / 2);
  std::vector<double> f0(m, 0.0), frame(w), r(max_lag + 2, 0.0);
  for (std::size_t t = 0; t < m; ++t) {
    const double* src = padded.data() + t * cfg.hop_length;
    double mean = 0;
    for (std::size_t i = 0; i < w; ++i) mean += src[i];
    mean /= static_cast<double>(w);
    double energy = 0;
    for (std::size_t i = 0; i < w; ++i) {
      frame[i] = src[i] - mean;
      energy += frame[i] * frame[i];
    }
    if (energy < 1e-10) continue;
    double best = -1;
    for (std::size_t lag = min_lag - 1; lag <= max_lag + 1; ++lag) {
      double xy = 0, xx = 0, yy = 0;
      for (std::size_t i = 0; i + lag < w; ++i) {
        xy += frame[i] * frame[i + lag];
        xx += frame[i] * frame[i];
        yy += frame[i + lag] * frame[i + lag];
      }
      r[lag] = (xx > 0 && yy > 0) ? xy / std::sqrt(xx * yy) : 0.0;
      if (lag >= min_lag && lag <= max_lag) best = std::max(best, r[lag]);
    }
    if (best < opt.voicing_threshold) continue;
    // Smallest lag whose local peak is close to the global one avoids octave-down errors.
    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) {
      if (r[lag] >= 0.9 * best && r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1]) {
        const double a = r[lag - 1], b = r[lag], c = r[lag + 1];
        const double denom = a - 2 * b + c;
        const double shift = std::abs(denom) > 1e-12 ? std::clamp(0.5 * (a - c) / denom, -0.5, 0.5) : 0.0;
        f0[t] = sr / (static_cast<double>(lag) + shift);
        break;
      }
    }
  }
  return f0;
}

GriffinLimResult griffin_lim(const MelSpectrogram& mel, const SpectrogramConfig& cfg, const GriffinLimOptions& opt) {
  cfg.validate();
  if (opt.iterations == 0) throw ConfigError("Griffin-Lim needs at least one iteration");
  const std::size_t frames = mel.num_frames(), bins = cfg.n_bins(), n = cfg.n_fft, hop = cfg.hop_length;
  if (frames == 0) throw ShapeError("empty mel spectrogram");
  if (mel.num_mels() != cfg.n_mels) {
    throw ShapeError("mel has " + std::to_string(mel.num_mels()) + " channels, expected " + std::to_string(cfg.n_mels));
  }

  const Tensor<double> fb = mel_filterbank(cfg);
  Eigen::MatrixXd f(cfg.n_mels, bins);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    for (std::size_t k = 0; k < bins; ++k) f(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) = fb(m, k);
  }
  const Eigen::MatrixXd pinv = f.completeOrthogonalDecomposition().pseudoInverse();
  Eigen::MatrixXd lin(cfg.n_mels, frames);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      lin(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t)) = std::exp(static_cast<double>(mel.frames(t, m)));
    }
  }
  const Eigen::MatrixXd mag = (pinv * lin).cwiseMax(0.0);  // bins x frames
  std::vector<double> target(frames * bins);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < bins; ++k) target[t * bins + k] = mag(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t));
  }

  // Work on the uncentered signal of length (M-1)*hop + n_fft so that overlap-add with
  // sum-of-squared-window normalization is the exact least-squares inverse of the STFT.
  const std::size_t len = (frames - 1) * hop + n;
  const std::vector<double> window = analysis_window(cfg);
  std::vector<double> wsum(len, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < n; ++i) wsum[t * hop + i] += window[i] * window[i];
  }
  RealFft fft(n);
  Rng rng(opt.seed);
  Spectrum y;
  y.frames = frames;
  y.bins = bins;
  y.data.resize(frames * bins);
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    const std::size_t k = i % bins;
    const double phase = (k == 0 || k == bins - 1) ? 0.0 : 2 * std::numbers::pi * rng.uniform();
    y.data[i] = std::polar(target[i], phase);
  }

  auto inverse = [&](const Spectrum& spec) {
    std::vector<double> x(len, 0.0), buf(n);
    std::vector<std::complex<double>> tmp(bins);
    for (std::size_t t = 0; t < frames; ++t) {
      std::copy(spec.data.begin() + static_cast<std::ptrdiff_t>(t * bins),
                spec.data.begin() + static_cast<std::ptrdiff_t>((t + 1) * bins), tmp.begin());
      fft.inverse(tmp, buf);
      for (std::size_t i = 0; i < n; ++i) x[t * hop + i] += window[i] * buf[i] / static_cast<double>(n);
    }
    for (std::size_t i = 0; i < len; ++i) x[i] = wsum[i] > 1e-12 ? x[i] / wsum[i] : 0.0;
    return x;
  };

  GriffinLimResult out;
  std::vector<double> x;
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    x = inverse(y);
    const Spectrum s = frames_stft(x, frames, cfg, window);
    double resid = 0;
    for (std::size_t i = 0; i < s.data.size(); ++i) {
      const std::size_t k = i % bins;
      const double weight = (k == 0 || k == bins - 1) ? 1.0 : 2.0;
      const double a = std::abs(s.data[i]);
      resid += weight * (a - target[i]) * (a - target[i]);
      y.data[i] = a > 1e-12 ? s.data[i] * (target[i] / a) : std::complex<double>(target[i], 0.0);
    }
    out.residuals.push_back(std::sqrt(resid));
  }
  x = inverse(y);

  const std::size_t offset = n / 2, count = std::min(frames * hop, len - offset);
  out.wave.sample_rate = cfg.sample_rate;
  out.wave.samples.resize(count);
  double peak = 0;
  for (std::size_t i = 0; i < count; ++i) peak = std::max(peak, std::abs(x[offset + i]));
  out.raw_peak = peak;
  const double gain = peak >= opt.silence_peak ? opt.target_peak / peak : 1.0;
  for (std::size_t i = 0; i < count; ++i) out.wave.samples[i] = static_cast<float>(x[offset + i] * gain);
  return out;
}

namespace {

void put_u32(std::ostream& o, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ostream& o, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  o.write(reinterpret_cast<const char*>(b), 2);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

}  // namespace

void write_wav(const std::string& path, const Waveform& wave) {
  if (wave.sample_rate == 0) throw ConfigError("sample rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate * 2));
  put_u16(out, 2);
  put_u16(out, 16);
  out.write("data", 4);
  put_u32(out, data_bytes);
  for (float s : wave.samples) {
    const double v = std::clamp(static_cast<double>(s), -1.0, 1.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(v * 32767.0))));
  }
  if (!out) throw DataError("failed writing " + path);
}

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError(path + ": not a RIFF/WAVE file");
  }
  Waveform wave;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t size = get_u32(bytes.data() + pos + 4);
    const unsigned char* body = bytes.data() + pos + 8;
    if (pos + 8 + size > bytes.size()) throw DataError(path + ": truncated chunk");
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (size < 16) throw DataError(path + ": short fmt chunk");
      const std::uint16_t format = get_u16(body), channels = get_u16(body + 2), bits = get_u16(body + 14);
      if (format != 1 || bits != 16) throw DataError(path + ": only 16-bit PCM is supported");
      if (channels != 1) throw DataError(path + ": only mono audio is supported");
      wave.sample_rate = get_u32(body + 4);
      if (wave.sample_rate == 0) throw DataError(path + ": zero sample rate");
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      if (!have_fmt) throw DataError(path + ": data chunk before fmt chunk");
      wave.samples.resize(size / 2);
      for (std::size_t i = 0; i < wave.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(get_u16(body + 2 * i));
        wave.samples[i] = static_cast<float>(std::clamp(v / 32767.0, -1.0, 1.0));
      }
      return wave;
    }
    pos += 8 + size + (size & 1);
  }
  throw DataError(path + ": no data chunk");
}

}  // namespace es::dsp
