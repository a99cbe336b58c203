#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "efficientspeech/kv.hpp"
#include "efficientspeech/tensor.hpp"
#include "efficientspeech/types.hpp"

namespace es::dsp {

struct SpectrogramConfig {
  std::size_t sample_rate = 22050;
  std::size_t n_fft = 1024;
  std::size_t win_length = 1024;
  std::size_t hop_length = 256;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;

  std::size_t n_bins() const { return n_fft / 2 + 1; }
  void validate() const;  // ConfigError
  void write(KeyValues& kv) const;
  static SpectrogramConfig read(const KeyValues& kv);
};

struct Waveform {
  std::vector<float> samples;
  std::size_t sample_rate = 22050;

  double seconds() const { return static_cast<double>(samples.size()) / static_cast<double>(sample_rate); }
};

// One-sided complex spectrum, frame-major.
struct Spectrum {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> data;

  std::complex<double> operator()(std::size_t t, std::size_t k) const { return data[t * bins + k]; }
  Tensor<double> magnitude() const;
};

// Periodic Hann of win_length, zero-padded symmetrically to n_fft.
std::vector<double> analysis_window(const SpectrogramConfig& cfg);

// Frames start every hop after reflect-padding n_fft/2 on both sides; M = 1 + len/hop.
// Throws SequenceTooShortError when len < win_length.
std::size_t num_frames(std::size_t num_samples, const SpectrogramConfig& cfg);
Spectrum stft(const Waveform& wave, const SpectrogramConfig& cfg);

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// n_mels x n_bins triangular filters, each row summing to 1.
Tensor<double> mel_filterbank(const SpectrogramConfig& cfg);
// Peak frequencies of the filters (n_mels values).
std::vector<double> mel_center_frequencies(const SpectrogramConfig& cfg);

// Natural-log mel magnitudes, floored at log_floor.
MelSpectrogram mel_spectrogram(const Waveform& wave, const SpectrogramConfig& cfg);
MelSpectrogram mel_from_magnitude(const Tensor<double>& magnitude, const SpectrogramConfig& cfg);

// L2 norm of every STFT magnitude frame.
std::vector<double> frame_energy(const Waveform& wave, const SpectrogramConfig& cfg);

struct F0Options {
  double min_hz = 80.0;
  double max_hz = 800.0;
  double voicing_threshold = 0.3;
  std::size_t window = 1024;
};

// Frame-synchronous normalized-autocorrelation pitch in Hz, 0 for unvoiced frames.
std::vector<double> estimate_f0(const Waveform& wave, const SpectrogramConfig& cfg,
                                const F0Options& opt = {});

struct GriffinLimOptions {
  std::size_t iterations = 32;
  std::uint64_t seed = 0;
  double target_peak = 0.95;
  double silence_peak = 1e-3;  // below this the output is left unnormalized
};

struct GriffinLimResult {
  Waveform wave;
  // ||STFT(x_k)| - S| over the full conjugate-symmetric spectrum, one entry per iteration.
  std::vector<double> residuals;
  double raw_peak = 0.0;
};

GriffinLimResult griffin_lim(const MelSpectrogram& mel, const SpectrogramConfig& cfg,
                             const GriffinLimOptions& opt = {});

// 16-bit PCM mono RIFF/WAVE.
void write_wav(const std::string& path, const Waveform& wave);
Waveform read_wav(const std::string& path);

}  // namespace es::dsp
