#include "efficientspeech/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "efficientspeech/ops.hpp"
#include "json.hpp"

namespace es::prof {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

template <typename T>
ParamReport count_parameters(const std::vector<NamedParam<T>>& params) {
  ParamReport r;
  for (const auto& p : params) {
    const std::uint64_t n = p.var->value.size();
    r.total += n;
    auto it = std::find_if(r.groups.begin(), r.groups.end(), [&](const ParamGroup& g) { return g.name == p.group; });
    if (it == r.groups.end()) {
      r.groups.push_back({p.group, n});
    } else {
      it->count += n;
    }
  }
  return r;
}

template ParamReport count_parameters(const std::vector<NamedParam<float>>&);
template ParamReport count_parameters(const std::vector<NamedParam<double>>&);

std::uint64_t linear_macs(std::uint64_t rows, std::uint64_t in, std::uint64_t out) { return rows * in * out; }

std::uint64_t conv1d_macs(std::uint64_t out_len, std::uint64_t in, std::uint64_t out, std::uint64_t groups,
                          std::uint64_t kernel) {
  return out_len * out * (in / groups) * kernel;
}

std::uint64_t attention_macs(std::uint64_t n, std::uint64_t c) { return 4 * n * c * c + 2 * n * n * c; }

std::uint64_t FlopReport::module_total(const std::string& module) const {
  std::uint64_t s = 0;
  for (const auto& l : layers) {
    if (l.module == module) s += l.macs;
  }
  return s;
}

FlopReport count_flops(const ModelConfig& c, std::size_t n, std::size_t m) {
  c.validate();
  if (n == 0) throw ShapeError("FLOP count needs at least one phoneme");
  FlopReport r;
  r.phonemes = n;
  r.frames = m;
  auto add = [&](const std::string& module, const std::string& layer, std::uint64_t macs) {
    r.layers.push_back({module, layer, macs});
    r.total += macs;
  };

  std::size_t len = n, width = c.d;
  const BlockConfig* blocks[] = {&c.block1, &c.block2};
  std::size_t block2_len = 0;
  for (int b = 0; b < 2; ++b) {
    const BlockConfig& bc = *blocks[b];
    const std::string mod = "encoder.block" + std::to_string(b + 1);
    const std::size_t k = bc.merge_kernel, w = bc.out_dim, e = w * bc.ffn_expansion;
    const std::size_t out_len = ops::conv1d_output_length(len, k, {bc.merge_stride, (k - 1) / 2, width});
    add(mod, "merge.dw", conv1d_macs(out_len, width, width, width, k));
    add(mod, "merge.pw", linear_macs(out_len, width, w));
    add(mod, "attn", attention_macs(out_len, w));
    add(mod, "ffn.in", linear_macs(out_len, w, e));
    add(mod, "ffn.dw", conv1d_macs(out_len, e, e, e, k));
    add(mod, "ffn.out", linear_macs(out_len, e, w));
    len = out_len;
    width = w;
    if (b == 1) block2_len = out_len;
  }

  const std::size_t f = c.feature_dim();
  add("phoneme_fuser", "up1", linear_macs(n, f, f));
  add("phoneme_fuser", "up2", linear_macs(block2_len, c.block2.out_dim, f));
  add("phoneme_fuser", "up2.deconv", block2_len * f * f * c.upsample_kernel);
  add("phoneme_fuser", "fuse", linear_macs(n, 2 * f, f));

  const std::size_t h = c.head_hidden, hk = c.head_kernel;
  for (const char* head : {"pitch", "energy", "duration"}) {
    const std::string mod = std::string("acoustic.") + head;
    add(mod, "conv1", conv1d_macs(n, f, h, 1, hk));
    add(mod, "conv2", conv1d_macs(n, h, h, 1, hk));
    add(mod, "out", linear_macs(n, h, 1));
  }

  const std::size_t d = c.d, dk = c.decoder_kernel;
  for (std::size_t b = 0; b < c.decoder_blocks; ++b) {
    const std::string p = "block" + std::to_string(b + 1);
    add("decoder", p + ".linear", linear_macs(m, d, d));
    for (const char* conv : {".conv1", ".conv2"}) {
      add("decoder", p + conv + ".dw", conv1d_macs(m, d, d, d, dk));
      add("decoder", p + conv + ".pw", linear_macs(m, d, d));
    }
  }
  add("decoder", "out", linear_macs(m, d, c.n_mels));
  return r;
}

std::size_t frames_for_seconds(double seconds, const dsp::SpectrogramConfig& cfg) {
  return static_cast<std::size_t>(
      std::llround(seconds * static_cast<double>(cfg.sample_rate) / static_cast<double>(cfg.hop_length)));
}

Stats summarize(std::vector<double> v) {
  Stats s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  const std::size_t mid = v.size() / 2;
  s.median = v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
  return s;
}

double measure_timer_resolution() {
  double best = 1.0;
  for (int i = 0; i < 64; ++i) {
    const auto a = Clock::now();
    auto b = Clock::now();
    while (b == a) b = Clock::now();
    best = std::min(best, std::chrono::duration<double>(b - a).count());
  }
  return best;
}

namespace {

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

BenchResult run_bench(const MelFn& generate, const VocoderFn* vocoder, const BenchOptions& opt) {
  if (opt.samples == 0) throw ConfigError("benchmark needs at least one sample");
  if (opt.repeats == 0) throw ConfigError("benchmark needs at least one repeat");
  for (std::size_t w = 0; w < opt.warmup; ++w) {
    auto mel = generate(w % opt.samples);
    if (vocoder) (*vocoder)(mel);
  }
  BenchResult r;
  r.samples = opt.samples;
  r.repeats = opt.repeats;
  r.with_vocoder = vocoder != nullptr;
  std::vector<double> mrtf, rtf;
  for (std::size_t i = 0; i < opt.samples; ++i) {
    double mel_time = 0, wave_time = 0, mel_audio = 0, wave_audio = 0;
    for (std::size_t k = 0; k < opt.repeats; ++k) {
      const auto t0 = Clock::now();
      MelSpectrogram mel = generate(i);
      mel_time += seconds_since(t0);
      mel_audio = mel.seconds();
      if (vocoder) {
        const auto t1 = Clock::now();
        dsp::Waveform wave = (*vocoder)(mel);
        wave_time += seconds_since(t1);
        wave_audio = wave.seconds();
      }
    }
    mel_time /= static_cast<double>(opt.repeats);
    wave_time /= static_cast<double>(opt.repeats);
    r.audio_seconds.push_back(vocoder ? wave_audio : mel_audio);
    r.mel_seconds.push_back(mel_time);
    mrtf.push_back(mel_audio / mel_time);
    if (vocoder) {
      r.wave_seconds.push_back(wave_time);
      rtf.push_back(wave_audio / (mel_time + wave_time));
    }
  }
  r.mrtf = summarize(mrtf);
  r.rtf = summarize(rtf);
  const double resolution = opt.timer_resolution > 0 ? opt.timer_resolution : measure_timer_resolution();
  const double shortest = *std::min_element(r.mel_seconds.begin(), r.mel_seconds.end());
  if (resolution > 0.01 * shortest) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "timer resolution %.3g s exceeds 1%% of the shortest measured time %.3g s",
                  resolution, shortest);
    r.warnings.emplace_back(buf);
  }
  return r;
}

}  // namespace

BenchResult measure_mrtf(const MelFn& generate, const BenchOptions& opt) { return run_bench(generate, nullptr, opt); }

BenchResult measure_rtf(const MelFn& generate, const VocoderFn& vocoder, const BenchOptions& opt) {
  return run_bench(generate, &vocoder, opt);
}

std::string relative_percent(double reference, double value) {
  if (!(value > 0)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * reference / value);
  return buf;
}

namespace {

json stats_json(const Stats& s) { return {{"mean", s.mean}, {"min", s.min}, {"max", s.max}, {"median", s.median}}; }

Stats stats_from(const json& j) {
  return {j.at("mean").get<double>(), j.at("min").get<double>(), j.at("max").get<double>(), j.at("median").get<double>()};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }
std::string lpad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

}  // namespace

std::string emit_json(const Report& report, int indent) {
  json j;
  j["schema"] = 1;
  if (report.params) {
    json groups = json::array();
    for (const auto& g : report.params->groups) groups.push_back({{"name", g.name}, {"count", g.count}});
    j["params"] = {{"total", report.params->total},
                   {"groups", groups},
                   {"reference", kReferenceParams},
                   {"relative", relative_percent(kReferenceParams, static_cast<double>(report.params->total))}};
  }
  if (report.flops) {
    const auto& f = *report.flops;
    json layers = json::array();
    for (const auto& l : f.layers) layers.push_back({{"module", l.module}, {"layer", l.layer}, {"macs", l.macs}});
    j["flops"] = {{"phonemes", f.phonemes},
                  {"frames", f.frames},
                  {"total", f.total},
                  {"layers", layers},
                  {"convention", kFlopConvention},
                  {"reference", kReferenceFlops},
                  {"reference_seconds", kReferenceSeconds},
                  {"relative", relative_percent(kReferenceFlops, static_cast<double>(f.total))}};
  }
  if (report.bench) {
    const auto& b = *report.bench;
    json jb = {{"samples", b.samples},
               {"repeats", b.repeats},
               {"with_vocoder", b.with_vocoder},
               {"audio_seconds", b.audio_seconds},
               {"mel_seconds", b.mel_seconds},
               {"wave_seconds", b.wave_seconds},
               {"warnings", b.warnings},
               {"reference_mrtf", {{"gpu", kReferenceMrtfGpu}, {"rpi4", kReferenceMrtfRpi4}}}};
    if (b.samples == 0) {
      jb["mrtf"] = nullptr;
      jb["rtf"] = nullptr;
    } else {
      jb["mrtf"] = stats_json(b.mrtf);
      jb["rtf"] = b.with_vocoder ? stats_json(b.rtf) : json(nullptr);
    }
    j["bench"] = jb;
  }
  return j.dump(indent);
}

Report parse_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("report is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("schema", 0) != 1) throw DataError("report has an unsupported schema");
  Report r;
  try {
    if (j.contains("params")) {
      ParamReport p;
      p.total = j["params"].at("total").get<std::uint64_t>();
      for (const auto& g : j["params"].at("groups")) p.groups.push_back({g.at("name"), g.at("count")});
      r.params = p;
    }
    if (j.contains("flops")) {
      FlopReport f;
      const auto& jf = j["flops"];
      f.phonemes = jf.at("phonemes");
      f.frames = jf.at("frames");
      f.total = jf.at("total");
      for (const auto& l : jf.at("layers")) f.layers.push_back({l.at("module"), l.at("layer"), l.at("macs")});
      r.flops = f;
    }
    if (j.contains("bench")) {
      BenchResult b;
      const auto& jb = j["bench"];
      b.samples = jb.at("samples");
      b.repeats = jb.at("repeats");
      b.with_vocoder = jb.at("with_vocoder");
      b.audio_seconds = jb.at("audio_seconds").get<std::vector<double>>();
      b.mel_seconds = jb.at("mel_seconds").get<std::vector<double>>();
      b.wave_seconds = jb.at("wave_seconds").get<std::vector<double>>();
      b.warnings = jb.at("warnings").get<std::vector<std::string>>();
      if (!jb.at("mrtf").is_null()) b.mrtf = stats_from(jb["mrtf"]);
      if (!jb.at("rtf").is_null()) b.rtf = stats_from(jb["rtf"]);
      r.bench = b;
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string emit_text(const Report& report) {
  std::ostringstream out;
  if (report.params) {
    const auto& p = *report.params;
    out << "Parameters\n";
    for (const auto& g : p.groups) out << "  " << pad(g.name, 28) << lpad(std::to_string(g.count), 12) << '\n';
    out << "  " << pad("total", 28) << lpad(std::to_string(p.total), 12) << "   reference "
        << fmt("%.2fM", kReferenceParams / 1e6) << "   relative "
        << relative_percent(kReferenceParams, static_cast<double>(p.total)) << '\n';
  }
  if (report.flops) {
    const auto& f = *report.flops;
    out << (report.params ? "\n" : "") << "FLOPs for N=" << f.phonemes << " phonemes, M=" << f.frames
        << " frames\n";
    for (const auto& l : f.layers) {
      out << "  " << pad(l.module + "." + l.layer, 36) << lpad(std::to_string(l.macs), 14) << '\n';
    }
    out << "  " << pad("total", 36) << lpad(std::to_string(f.total), 14) << "   "
        << fmt("%.2f MFLOPs", static_cast<double>(f.total) / 1e6) << "   reference "
        << fmt("%.2f GFLOPs", kReferenceFlops / 1e9) << fmt(" (%.0f s)", kReferenceSeconds) << "   relative "
        << relative_percent(kReferenceFlops, static_cast<double>(f.total)) << '\n';
    out << "  convention: " << kFlopConvention << '\n';
  }
  if (report.bench) {
    const auto& b = *report.bench;
    out << (report.params || report.flops ? "\n" : "") << "Benchmark\n";
    if (b.samples == 0) {
      out << "  no samples\n";
    } else {
      out << "  samples " << b.samples << ", repeats " << b.repeats << '\n';
      out << "  " << pad("", 6) << lpad("mean", 12) << lpad("min", 12) << lpad("max", 12) << lpad("median", 12) << '\n';
      auto row = [&](const char* name, const Stats& s) {
        out << "  " << pad(name, 6) << lpad(fmt("%.2f", s.mean), 12) << lpad(fmt("%.2f", s.min), 12)
            << lpad(fmt("%.2f", s.max), 12) << lpad(fmt("%.2f", s.median), 12) << '\n';
      };
      row("mRTF", b.mrtf);
      if (b.with_vocoder) row("RTF", b.rtf);
    }
    out << "  reference mRTF " << fmt("%.1f", kReferenceMrtfGpu) << " (GPU), " << fmt("%.1f", kReferenceMrtfRpi4)
        << " (RPi4); not expected to match desk hardware\n";
    for (const auto& w : b.warnings) out << "  warning: " << w << '\n';
  }
  return out.str();
}

}  // namespace es::prof
