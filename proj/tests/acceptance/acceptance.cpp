// Prints one PASS/FAIL line per acceptance criterion; exits non-zero if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "efficientspeech/archive.hpp"
#include "efficientspeech/profiler.hpp"
#include "efficientspeech/rng.hpp"
#include "efficientspeech/training.hpp"

#ifdef ES_HAVE_CLI
#include "cli.hpp"
#endif

using namespace es;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failure_.empty()) failure_ = what;
    ok_ = ok_ && ok;
  }
  Outcome done(std::string detail) const {
    if (!ok_) detail += "; first failure: " + failure_;
    return {ok_, std::move(detail)};
  }

 private:
  bool ok_ = true;
  std::string failure_;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

PhonemeSequence random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::size_t> ids(n);
  for (auto& id : ids) id = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(vocab) - 1));
  return PhonemeSequence(ids);
}

std::vector<TrainSample> toy_samples(std::size_t n, std::uint64_t seed) {
  std::vector<TrainSample> out;
  for (auto& u : generate_toy_dataset(n, seed, {})) out.push_back(std::move(u.sample));
  return out;
}

// ---------------------------------------------------------------------------------------------

Outcome parameter_band() {
  const Model<float> m(ModelConfig{}, 0);
  const auto r = prof::count_parameters(m);
  Checker c;
  c.expect(r.total >= 180'000 && r.total <= 400'000, "total outside [180k, 400k]");
  std::uint64_t sum = 0;
  for (const auto& g : r.groups) sum += g.count;
  c.expect(sum == r.total, "groups do not sum to the total");
  return c.done(fmt("%llu parameters (reference %.2fM, %s of ours)", static_cast<unsigned long long>(r.total),
                    prof::kReferenceParams / 1e6,
                    prof::relative_percent(prof::kReferenceParams, static_cast<double>(r.total)).c_str()));
}

Outcome flop_band() {
  const ModelConfig cfg;
  const std::size_t frames = prof::frames_for_seconds(prof::kReferenceSeconds, {});
  const auto r = prof::count_flops(cfg, 220, frames);
  Checker c;
  c.expect(frames == 517, "6 s is not 517 frames");
  c.expect(r.total >= 40'000'000 && r.total <= 150'000'000, "total outside [40, 150] MFLOPS");
  const auto a = prof::count_flops(cfg, 220, 500), b = prof::count_flops(cfg, 220, 1000);
  c.expect(b.module_total("decoder") == 2 * a.module_total("decoder"), "decoder not exactly linear in M");

  // The analytic count must agree with what the kernels actually execute.
  Rng rng(17);
  const Model<float> m(cfg, 1);
  const PhonemeSequence ids = random_ids(rng, 40, cfg.vocab_size);
  std::vector<std::size_t> dur(ids.size());
  for (auto& d : dur) d = static_cast<std::size_t>(rng.uniform_int(1, 8));
  const std::size_t total = std::accumulate(dur.begin(), dur.end(), std::size_t{0});
  ops::reset_mac_count();
  ag::Tape<float> tape(false);
  m.forward_train(tape, ids, TeacherSignals{dur, std::vector<double>(ids.size(), 200), std::vector<double>(ids.size(), 1)});
  c.expect(ops::mac_count() == prof::count_flops(cfg, ids.size(), total).total, "analytic count != executed MACs");

  return c.done(fmt("%.2f MFLOPS for N=220, M=517 (reference %.2f GFLOPS, %s of ours); decoder %llu -> %llu",
                    static_cast<double>(r.total) / 1e6, prof::kReferenceFlops / 1e9,
                    prof::relative_percent(prof::kReferenceFlops, static_cast<double>(r.total)).c_str(),
                    static_cast<unsigned long long>(a.module_total("decoder")),
                    static_cast<unsigned long long>(b.module_total("decoder"))));
}

Outcome shape_chain() {
  const Model<float> m(ModelConfig{}, 3);
  Rng rng(5);
  Checker c;
  for (std::size_t n : {1, 2, 7, 10, 64}) {
    const std::string at = " at N=" + std::to_string(n);
    ag::Tape<float> tape(false);
    const PhonemeSequence ids = random_ids(rng, n, 71);
    const auto enc = m.encode(tape, ids);
    c.expect(enc.embedded->value.shape() == Shape{n, 128}, "embedding" + at);
    c.expect(enc.block1->value.shape() == Shape{n, 32}, "block1" + at);
    c.expect(enc.block2->value.shape() == Shape{(n + 1) / 2, 64}, "block2" + at);
    c.expect(enc.fused->value.shape() == Shape{n, 32}, "phoneme fuser" + at);
    const auto a = m.acoustic(tape, enc.fused);
    const auto fused = m.fuse(tape, enc.fused, a);
    c.expect(fused->value.shape() == Shape{n, 128}, "feature fusion" + at);
    std::vector<std::size_t> counts(n);
    for (auto& k : counts) k = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const std::size_t frames = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    const auto up = length_regulate(tape, fused, counts);
    c.expect(up->value.shape() == Shape{frames, 128}, "length regulator" + at);
    const auto mel = m.decode(tape, up);
    c.expect(mel->value.shape() == Shape{frames, 80}, "decoder" + at);
  }
  return c.done("N in {1, 2, 7, 10, 64}");
}

Outcome gradient_oracle() {
  Checker c;
  double worst = 0;
  std::string worst_name;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(1000 + seed);
    TrainSample s;
    s.ids = random_ids(rng, 3, 6);
    for (std::size_t i = 0; i < 3; ++i) {
      s.durations.push_back(static_cast<std::size_t>(rng.uniform_int(1, 4)));
      s.pitch.push_back(rng.uniform(100, 300));
      s.energy.push_back(rng.uniform(0.5, 2.0));
    }
    s.mel = Tensor<float>({s.total_frames(), 4});
    for (auto& v : s.mel.data()) v = static_cast<float>(rng.uniform(-3, 1));
    ModelConfig cfg = ModelConfig::tiny();
    fit_acoustic_statistics(cfg, {s});
    Model<double> m(cfg, seed);
    const auto r = gradient_check(m, s);
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = r.worst_parameter;
    }
    c.expect(r.max_relative_error <= 1e-4, "seed " + std::to_string(seed) + " " + r.worst_parameter);
  }
  return c.done(fmt("max relative error %.3g over 5 seeds (worst %s)", worst, worst_name.c_str()));
}

Outcome overfit(Model<float>& trained) {
  const auto data = toy_samples(8, 7);
  ModelConfig mc;
  fit_acoustic_statistics(mc, data);
  Model<float> m(mc, 7);
  TrainConfig tc;
  tc.total_epochs = 500;
  tc.seed = 7;
  AdamState<float> state;
  const auto start = std::chrono::steady_clock::now();
  const auto log = train(m, data, tc, state);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Checker c;
  c.expect(log.size() == 500, "expected 500 steps");
  if (log.empty()) return c.done("no steps");
  const auto& f = log.front().loss;
  const auto& l = log.back().loss;
  c.expect(l.total <= 0.1 * f.total, "total loss fell less than 90%");
  c.expect(l.mel < f.mel, "L_mel did not decrease");
  c.expect(l.duration < f.duration, "L_d did not decrease");
  trained = std::move(m);
  return c.done(fmt("%zu steps in %.1f s; total %.3f -> %.3f (%.1f%% drop); L_mel %.3f -> %.3f; "
                    "L_p %.3f -> %.3f; L_e %.3f -> %.3f; L_d %.3f -> %.3f",
                    log.size(), secs, f.total, l.total, 100.0 * (1 - l.total / f.total), f.mel, l.mel, f.pitch,
                    l.pitch, f.energy, l.energy, f.duration, l.duration));
}

Outcome length_regulator() {
  Rng rng(2024);
  Checker c;
  std::size_t nonempty = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 16));
    std::vector<double> d(n);
    for (auto& v : d) v = rng.uniform(-2, 70);
    const double scale = rng.uniform(0.2, 3.0);
    std::size_t expected = 0;
    for (double v : d) {
      // round half away from zero, then clamp
      const double r = v * scale < 0 ? -std::floor(-v * scale + 0.5) : std::floor(v * scale + 0.5);
      expected += static_cast<std::size_t>(std::clamp(r, 0.0, 50.0));
    }
    const auto frames = duration_to_frames(d, scale, 50);
    c.expect(std::accumulate(frames.begin(), frames.end(), std::size_t{0}) == expected,
             "duration_to_frames sum, trial " + std::to_string(trial));
    if (expected == 0) continue;
    ++nonempty;
    ag::Tape<double> tape(false);
    Tensor<double> x({n, 3});
    for (std::size_t i = 0; i < n; ++i) x(i, 0) = static_cast<double>(i);
    const auto y = length_regulate(tape, ag::leaf(x), frames);
    c.expect(y->value.rows() == expected, "regulated length, trial " + std::to_string(trial));
    std::size_t row = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < frames[i]; ++k, ++row) {
        if (row < y->value.rows()) c.expect(y->value(row, 0) == static_cast<double>(i), "row order");
      }
    }
  }
  return c.done(fmt("1000 random vectors (%zu non-empty)", nonempty));
}

Outcome dsp_oracles() {
  const dsp::SpectrogramConfig cfg;
  Checker c;
  const double hz = 20.0 * 22050.0 / 1024.0;
  dsp::Waveform w;
  w.samples.resize(22050);
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    w.samples[i] = static_cast<float>(0.5 * std::sin(2 * std::numbers::pi * hz * static_cast<double>(i) / 22050.0));
  }
  const auto mag = dsp::stft(w, cfg).magnitude();
  std::size_t interior = 0;
  // Frames whose window lies entirely inside the signal.
  for (std::size_t t = 0; t < mag.rows(); ++t) {
    if (t * cfg.hop_length < cfg.n_fft / 2 || t * cfg.hop_length + cfg.n_fft / 2 > w.samples.size()) continue;
    ++interior;
    std::size_t best = 0;
    for (std::size_t k = 1; k < mag.cols(); ++k) {
      if (mag(t, k) > mag(t, best)) best = k;
    }
    c.expect(best == 20, "argmax bin at frame " + std::to_string(t));
  }

  const auto gl = dsp::griffin_lim(dsp::mel_spectrogram(w, cfg), cfg, {.iterations = 32});
  c.expect(gl.residuals.size() == 32, "32 residuals");
  double worst_rise = 0;
  for (std::size_t i = 1; i < gl.residuals.size(); ++i) worst_rise = std::max(worst_rise, gl.residuals[i] - gl.residuals[i - 1]);
  c.expect(worst_rise <= 1e-6, "Griffin-Lim residual increased");

  Rng rng(3);
  dsp::Waveform noise;
  noise.samples.resize(4000);
  for (auto& v : noise.samples) v = static_cast<float>(rng.uniform(-1, 1));
  noise.samples[0] = 1.0f;
  noise.samples[1] = -1.0f;
  const std::string path = (fs::temp_directory_path() / "es_acceptance.wav").string();
  dsp::write_wav(path, noise);
  const auto back = dsp::read_wav(path);
  fs::remove(path);
  double err = 0;
  c.expect(back.samples.size() == noise.samples.size(), "WAV length");
  for (std::size_t i = 0; i < std::min(back.samples.size(), noise.samples.size()); ++i) {
    err = std::max(err, std::abs(static_cast<double>(back.samples[i]) - noise.samples[i]));
  }
  c.expect(err <= 1.0 / 32767.0, "WAV round-trip error");
  return c.done(fmt("bin 20 on %zu interior frames; GL residual %.4g -> %.4g (max rise %.2g); WAV error %.3g",
                    interior, gl.residuals.front(), gl.residuals.back(), worst_rise, err));
}

Outcome determinism() {
  Checker c;
  const auto data = toy_samples(4, 11);
  auto run = [&] {
    ModelConfig mc;
    fit_acoustic_statistics(mc, data);
    Model<float> m(mc, 11);
    TrainConfig tc;
    tc.total_epochs = 6;
    tc.warmup_epochs = 2;
    tc.seed = 11;
    AdamState<float> st;
    train(m, data, tc, st);
    return std::pair{encode_weights(m, {}), encode_optimizer(m, st)};
  };
  const auto a = run(), b = run();
  c.expect(a.first == b.first, "trained archives differ");
  c.expect(a.second == b.second, "optimizer states differ");

  const std::string path = (fs::temp_directory_path() / "es_acceptance.esw").string();
  write_file(path, a.first);
  const LoadedModel loaded = load_weights(path);
  c.expect(encode_weights(loaded.model, loaded.spectrogram) == a.first, "save-load-save changed bytes");

  std::string kind = "none";
  try {
    decode_weights(std::string_view(a.first).substr(0, a.first.size() / 2));
  } catch (const ArchiveError& e) {
    kind = e.kind() == ArchiveError::Kind::truncated ? "truncated" : "other";
  }
  c.expect(kind == "truncated", "truncated archive not reported as truncated");
  std::string flipped = a.first;
  flipped[0] ^= 0x20;
  bool bad_magic = false;
  try {
    decode_weights(flipped);
  } catch (const ArchiveError& e) {
    bad_magic = e.kind() == ArchiveError::Kind::bad_magic;
  }
  c.expect(bad_magic, "bad magic not detected");

  std::string exit_note = "CLI not built";
#ifdef ES_HAVE_CLI
  write_file(path, a.first.substr(0, a.first.size() - 100));
  std::ostringstream out, err;
  const int code = cli::run({"synth", "--ids", "2 3 4", "--weights", path, "--out",
                             (fs::temp_directory_path() / "es_acceptance.wav").string()},
                            out, err);
  c.expect(code == 3, "CLI exit code for a corrupted archive is " + std::to_string(code));
  exit_note = "CLI exit " + std::to_string(code);
#endif
  fs::remove(path);
  return c.done(fmt("archive %zu bytes identical across runs; reload identical; corruption -> %s, %s", a.first.size(),
                    kind.c_str(), exit_note.c_str()));
}

Outcome benchmark(const Model<float>& trained) {
  Checker c;
  auto stub = [](std::size_t) {
    std::this_thread::sleep_for(std::chrono::milliseconds(500));
    MelSpectrogram m;
    m.hop_length = 256;
    m.sample_rate = 25600;
    m.frames = Tensor<float>({100, 80}, -11.5f);  // exactly 1.0 s
    return m;
  };
  const auto s = prof::measure_mrtf(stub, {.samples = 1, .repeats = 1, .warmup = 0});
  c.expect(std::abs(s.mrtf.mean - 2.0) <= 0.1, "sleep stub mRTF outside 2.0 +/- 5%");

  const auto data = toy_samples(8, 99);
  auto gen = [&](std::size_t i) { return trained.synthesize(data[i % data.size()].ids).mel; };
  const auto r = prof::measure_mrtf(gen, {.samples = 8, .repeats = 3});
  c.expect(r.mrtf.mean > 1.0, "real mRTF not above 1");
  return c.done(fmt("stub %.3f; model mRTF mean %.1f (min %.1f, max %.1f); reference GPU %.1f, RPi4 %.1f not comparable",
                    s.mrtf.mean, r.mrtf.mean, r.mrtf.min, r.mrtf.max, prof::kReferenceMrtfGpu,
                    prof::kReferenceMrtfRpi4));
}

}  // namespace

int main() {
  Model<float> trained(ModelConfig{}, 0);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"parameter-count band", parameter_band},
      {"FLOP band", flop_band},
      {"shape chain", shape_chain},
      {"gradient oracle", gradient_oracle},
      {"overfit run", [&] { return overfit(trained); }},
      {"length regulator", length_regulator},
      {"DSP oracles", dsp_oracles},
      {"determinism and persistence", determinism},
      {"benchmark sanity", [&] { return benchmark(trained); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
