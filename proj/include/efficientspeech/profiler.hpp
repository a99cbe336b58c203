#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "efficientspeech/dsp.hpp"
#include "efficientspeech/model.hpp"

namespace es::prof {

// Published figures for the default model, shown next to measured values.
inline constexpr double kReferenceParams = 0.27e6;
inline constexpr double kReferenceFlops = 0.09e9;  // 6 s of speech
inline constexpr double kReferenceSeconds = 6.0;
inline constexpr double kReferenceMrtfGpu = 953.3;
inline constexpr double kReferenceMrtfRpi4 = 104.3;

inline constexpr const char* kFlopConvention =
    "1 FLOP = 1 multiply-accumulate; linear, convolution and attention matmuls counted; "
    "normalization, activations, softmax and gathers not counted";

struct ParamGroup {
  std::string name;
  std::uint64_t count = 0;
};

struct ParamReport {
  std::uint64_t total = 0;
  std::vector<ParamGroup> groups;  // first-appearance order
};

template <typename T>
ParamReport count_parameters(const std::vector<NamedParam<T>>& params);
template <typename T>
ParamReport count_parameters(const Model<T>& model) {
  return count_parameters(model.parameters());
}

std::uint64_t linear_macs(std::uint64_t rows, std::uint64_t in, std::uint64_t out);
std::uint64_t conv1d_macs(std::uint64_t out_len, std::uint64_t in, std::uint64_t out, std::uint64_t groups,
                          std::uint64_t kernel);
// Q/K/V/output projections plus the score and context matmuls (n^2 c each, over all heads).
std::uint64_t attention_macs(std::uint64_t n, std::uint64_t c);

struct LayerFlops {
  std::string module;
  std::string layer;
  std::uint64_t macs = 0;
};

struct FlopReport {
  std::size_t phonemes = 0;
  std::size_t frames = 0;
  std::uint64_t total = 0;
  std::vector<LayerFlops> layers;

  std::uint64_t module_total(const std::string& module) const;
};

// Exact MACs of one mel-generation pass for n phonemes and m frames.
FlopReport count_flops(const ModelConfig& config, std::size_t phonemes, std::size_t frames);
// Frames covering `seconds` of audio at the given hop.
std::size_t frames_for_seconds(double seconds, const dsp::SpectrogramConfig& cfg);

struct Stats {
  double mean = 0, min = 0, max = 0, median = 0;
};
Stats summarize(std::vector<double> values);

struct BenchResult {
  std::size_t samples = 0;
  std::size_t repeats = 0;
  bool with_vocoder = false;
  std::vector<double> audio_seconds;
  std::vector<double> mel_seconds;   // mean over repeats
  std::vector<double> wave_seconds;  // empty without a vocoder
  Stats mrtf;
  Stats rtf;
  std::vector<std::string> warnings;
};

struct BenchOptions {
  std::size_t samples = 1;
  std::size_t repeats = 1;
  std::size_t warmup = 1;
  double timer_resolution = 0;  // seconds; 0 measures the clock
};

using MelFn = std::function<MelSpectrogram(std::size_t sample)>;
using VocoderFn = std::function<dsp::Waveform(const MelSpectrogram&)>;

// Smallest observable steady_clock step.
double measure_timer_resolution();

// Seconds of speech per second of mel generation; audio length is frames * hop / sr.
BenchResult measure_mrtf(const MelFn& generate, const BenchOptions& opt = {});
// As above, plus seconds of speech per second of mel + waveform generation.
BenchResult measure_rtf(const MelFn& generate, const VocoderFn& vocoder, const BenchOptions& opt = {});

struct Report {
  std::optional<ParamReport> params;
  std::optional<FlopReport> flops;
  std::optional<BenchResult> bench;
};

// Reference divided by measured, as a percentage.
std::string relative_percent(double reference, double value);

std::string emit_text(const Report& report);
std::string emit_json(const Report& report, int indent = 2);  // {"schema": 1, ...}
Report parse_json(const std::string& text);

}  // namespace es::prof
