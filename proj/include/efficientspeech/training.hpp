#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "efficientspeech/dsp.hpp"
#include "efficientspeech/kv.hpp"
#include "efficientspeech/model.hpp"

namespace es {

struct TrainSample {
  PhonemeSequence ids;
  std::vector<std::size_t> durations;  // frames per phoneme
  Tensor<float> mel;                   // sum(durations) x n_mels, log domain
  std::vector<double> pitch;           // Hz per phoneme, 0 when unvoiced
  std::vector<double> energy;          // mean frame energy per phoneme

  std::size_t total_frames() const;
  TeacherSignals teacher() const { return {durations, pitch, energy}; }
};

struct LossWeights {
  double mel = 10.0;
  double pitch = 2.0;
  double energy = 2.0;
  double duration = 1.0;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t warmup_epochs = 50;
  std::size_t total_epochs = 200;
  std::size_t batch_size = 8;
  double weight_decay = 1e-2;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables

  void validate() const;
  void write(KeyValues& kv) const;
  // Every key is required; unknown keys are rejected.
  static TrainConfig read(const KeyValues& kv);
};

struct LossBreakdown {
  double mel = 0;
  double pitch = 0;
  double energy = 0;
  double duration = 0;
  double total = 0;
};

template <typename T>
struct Loss {
  ag::Var<T> total;
  LossBreakdown terms;
};

// Weighted composite loss. Mel is the mean absolute error over M x n_mels; pitch, energy and
// duration are mean squared errors over the N phonemes. Pitch and energy are compared in the
// standardized units of the model config. Throws AlignmentError if mel lengths differ.
template <typename T>
Loss<T> compute_loss(ag::Tape<T>& tape, const TrainForward<T>& prediction, const TrainSample& sample,
                     const LossWeights& weights, const ModelConfig& config);

// Linear warmup from 0 to lr, then half-cosine to 0 at the final step.
double lr_at(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch);

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay followed by a bias-corrected Adam update. Missing gradients count as zero.
template <typename T>
void adamw_step(const std::vector<NamedParam<T>>& params, AdamState<T>& state, double lr, const AdamOptions& opt);

template <typename T>
double global_grad_norm(const std::vector<NamedParam<T>>& params);

// Rescales all gradients so the global norm is at most max_norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedParam<T>>& params, double max_norm);

struct ExtractOptions {
  std::size_t max_adjust = 2;
  dsp::F0Options f0{.window = 512};
};

// Log-mel, per-phoneme mean energy and voiced-only mean F0 over each duration span. The mel is
// trimmed or padded (repeating the last frame) at the tail to exactly sum(durations) frames.
TrainSample extract_targets(const dsp::Waveform& wave, const PhonemeSequence& ids,
                            const std::vector<std::size_t>& durations, const dsp::SpectrogramConfig& cfg,
                            const ExtractOptions& opt = {});

struct ToyUtterance {
  TrainSample sample;
  dsp::Waveform wave;
};

inline constexpr std::size_t kToyPhonemes = 12;
inline constexpr std::size_t kToyFirstId = 2;
// Fundamental of toy pseudo-phoneme p (0-based).
double toy_fundamental(std::size_t p);

// Deterministic sine-voice utterances of 3-8 pseudo-phonemes (token ids 2..13), 4-12 frames each.
std::vector<ToyUtterance> generate_toy_dataset(std::size_t n_samples, std::uint64_t seed,
                                               const dsp::SpectrogramConfig& cfg);

// Sets the pitch/energy normalization and the energy bin range from the training targets.
void fit_acoustic_statistics(ModelConfig& config, const std::vector<TrainSample>& data);

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  LossBreakdown loss;
  double grad_norm = 0;
};

void write_log_header(std::ostream& out);
void write_log_row(std::ostream& out, const TrainLogRow& row);

struct TrainHooks {
  std::ostream* csv = nullptr;
  // Called after every checkpoint_every-th epoch with the completed epoch (1-based).
  std::function<void(std::size_t epoch, const Model<float>&, const AdamState<float>&)> checkpoint;
};

// Mini-batch training with seeded shuffling and teacher forcing. `state` carries the optimizer
// across calls; a non-empty state resumes at state.step. Throws NumericError naming the first
// non-finite tensor.
std::vector<TrainLogRow> train(Model<float>& model, const std::vector<TrainSample>& data, const TrainConfig& config,
                               AdamState<float>& state, const TrainHooks& hooks = {});

struct GradientCheckResult {
  double max_relative_error = 0;
  std::string worst_parameter;
  std::vector<std::pair<std::string, double>> per_parameter;
};

// Backward versus Richardson-extrapolated central differences of the full composite loss on
// every parameter (double precision).
GradientCheckResult gradient_check(Model<double>& model, const TrainSample& sample,
                                   const LossWeights& weights = {}, double step = 1e-3);

}  // namespace es
