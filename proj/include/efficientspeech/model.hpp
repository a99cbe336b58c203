#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "efficientspeech/autograd.hpp"
#include "efficientspeech/config.hpp"
#include "efficientspeech/types.hpp"

namespace es {

template <typename T>
struct NamedParam {
  std::string name;
  std::string group;  // architecture block the tensor belongs to
  ag::Var<T> var;
};

// Per-phoneme predictions. y_pitch is in Hz, y_energy in frame-energy units, y_duration in
// frames (non-negative). The z tensors are the N x d/4 features fused back into the decoder.
template <typename T>
struct AcousticPrediction {
  Tensor<T> y_pitch;
  Tensor<T> y_energy;
  Tensor<T> y_duration;
  Tensor<T> z_pitch;
  Tensor<T> z_energy;
  Tensor<T> z_duration;
};

// Differentiable outputs of the three acoustic heads. pitch and energy are in standardized
// units: hz = pitch_mean + pitch_std * pitch.
template <typename T>
struct AcousticVars {
  ag::Var<T> pitch;
  ag::Var<T> energy;
  ag::Var<T> duration;
  ag::Var<T> z_pitch;
  ag::Var<T> z_energy;
  ag::Var<T> z_duration;
};

template <typename T>
struct EncoderTrace {
  ag::Var<T> embedded;  // N x d
  ag::Var<T> block1;    // N x d/4
  ag::Var<T> block2;    // ceil(N/2) x d/2
  ag::Var<T> up1;       // N x d/4
  ag::Var<T> up2;       // N x d/4 after trimming
  ag::Var<T> fused;     // N x d/4
};

// Ground truth used during training: durations drive length regulation and the pitch/energy
// targets select the embedding bins.
struct TeacherSignals {
  std::vector<std::size_t> durations;
  std::vector<double> pitch_hz;
  std::vector<double> energy;
};

template <typename T>
struct TrainForward {
  AcousticVars<T> acoustic;
  ag::Var<T> mel;  // M x n_mels with M = sum of teacher durations
};

template <typename T>
struct SynthesisResult {
  MelSpectrogram mel;
  AcousticPrediction<T> acoustic;
  std::vector<std::size_t> frames_per_phoneme;
};

// r_i = clamp(round(durations[i] * scale), 0, max_duration) with round half away from zero.
std::vector<std::size_t> duration_to_frames(std::span<const double> durations, double scale,
                                            std::size_t max_duration);

// Repeats row i of x counts[i] times. Throws EmptyUtteranceError when the total is zero.
template <typename T>
ag::Var<T> length_regulate(ag::Tape<T>& tape, const ag::Var<T>& x,
                           const std::vector<std::size_t>& counts);

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t seed = 0);

  // Parameters are shared nodes, so implicit copies would alias. Use clone().
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model clone() const { return cast<T>(); }

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParam<T>>& parameters() const { return params_; }
  ag::Var<T> parameter(std::string_view name) const;
  std::size_t parameter_count() const;
  void zero_grad();

  template <typename U>
  Model<U> cast() const {
    Model<U> out(config_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.parameters()[i].var->value = params_[i].var->value.template cast<U>();
    }
    return out;
  }

  ag::Var<T> embed(ag::Tape<T>& tape, const PhonemeSequence& ids) const;
  ag::Var<T> transformer_block(ag::Tape<T>& tape, int index, const ag::Var<T>& x) const;
  EncoderTrace<T> encode(ag::Tape<T>& tape, const PhonemeSequence& ids) const;
  AcousticVars<T> acoustic(ag::Tape<T>& tape, const ag::Var<T>& features,
                           const TeacherSignals* teacher = nullptr) const;
  ag::Var<T> fuse(ag::Tape<T>& tape, const ag::Var<T>& features, const AcousticVars<T>& a) const;
  ag::Var<T> decode(ag::Tape<T>& tape, const ag::Var<T>& upsampled) const;

  // Deterministic end-to-end inference with predicted durations.
  SynthesisResult<T> synthesize(const PhonemeSequence& ids, double duration_scale = 1.0) const;

  // Training-mode forward: teacher durations for length regulation and teacher bins for the
  // pitch/energy embeddings.
  TrainForward<T> forward_train(ag::Tape<T>& tape, const PhonemeSequence& ids,
                                const TeacherSignals& teacher) const;

  AcousticPrediction<T> to_prediction(const AcousticVars<T>& a) const;

 private:
  struct DWSep {
    ag::Var<T> dw_w, dw_b, pw_w, pw_b;
    std::size_t stride = 1;
  };
  struct Norm {
    ag::Var<T> gamma, beta;
  };
  struct Block {
    DWSep merge;
    ag::Var<T> wq, wk, wv, wo;
    Norm ln1, ln2;
    ag::Var<T> ffn_in_w, ffn_in_b, ffn_dw_w, ffn_dw_b, ffn_out_w, ffn_out_b;
    std::size_t heads = 1;
  };
  struct Head {
    ag::Var<T> conv1_w, conv1_b;
    Norm ln1;
    ag::Var<T> conv2_w, conv2_b;
    Norm ln2;
    ag::Var<T> out_w, out_b;
  };
  struct DecoderBlock {
    ag::Var<T> lin_w, lin_b;
    Norm ln0;
    DWSep conv1;
    Norm ln1;
    DWSep conv2;
    Norm ln2;
  };

  enum class Init { uniform, ones, zeros, normal };
  ag::Var<T> add_param(const std::string& name, const std::string& group, Shape shape, Init init,
                       double scale);
  DWSep make_dwsep(const std::string& prefix, const std::string& group, std::size_t cin,
                   std::size_t cout, std::size_t kernel, std::size_t stride);
  Norm make_norm(const std::string& prefix, const std::string& group, std::size_t c);
  Head make_head(const std::string& prefix, std::size_t c);
  void initialize(std::uint64_t seed);

  ag::Var<T> dwsep(ag::Tape<T>& tape, const DWSep& p, const ag::Var<T>& x) const;
  ag::Var<T> norm(ag::Tape<T>& tape, const Norm& n, const ag::Var<T>& x) const;
  ag::Var<T> conv_time(ag::Tape<T>& tape, const ag::Var<T>& x, const ag::Var<T>& w,
                       const ag::Var<T>& b, const ops::Conv1dParams& p) const;
  ag::Var<T> head_hidden(ag::Tape<T>& tape, const Head& h, const ag::Var<T>& x) const;

  ModelConfig config_;
  std::vector<NamedParam<T>> params_;
  std::vector<std::pair<Init, double>> init_;

  ag::Var<T> embedding_;
  Block blocks_[2];
  ag::Var<T> up1_w_, up1_b_, up2_w_, up2_b_, deconv_w_, deconv_b_, fuse_w_, fuse_b_;
  Head pitch_head_, energy_head_, duration_head_;
  ag::Var<T> pitch_table_, energy_table_;
  std::vector<DecoderBlock> decoder_;
  ag::Var<T> mel_w_, mel_b_;
  std::vector<double> pitch_bounds_, energy_bounds_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace es
