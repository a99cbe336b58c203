#include "efficientspeech/model.hpp"

#include <cmath>

#include "efficientspeech/rng.hpp"

namespace es {

using ag::Tape;
using ag::Var;

std::vector<std::size_t> duration_to_frames(std::span<const double> durations, double scale,
                                            std::size_t max_duration) {
  if (!(scale > 0)) throw ConfigError("duration scale must be positive");
  std::vector<std::size_t> frames(durations.size());
  for (std::size_t i = 0; i < durations.size(); ++i) {
    const double v = durations[i] * scale;
    if (std::isnan(v)) throw NumericError("duration " + std::to_string(i) + " is NaN");
    const double r = std::round(v);
    frames[i] = r <= 0 ? 0 : std::min<std::size_t>(max_duration, r >= 1e18 ? max_duration : static_cast<std::size_t>(r));
  }
  return frames;
}

template <typename T>
Var<T> length_regulate(Tape<T>& tape, const Var<T>& x, const std::vector<std::size_t>& counts) {
  std::size_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) throw EmptyUtteranceError("length regulation produced zero frames");
  return ag::repeat_rows(tape, x, counts);
}

template <typename T>
Var<T> Model<T>::add_param(const std::string& name, const std::string& group, Shape shape, Init init,
                           double scale) {
  for (const auto& p : params_) {
    if (p.name == name) throw ConfigError("duplicate parameter name " + name);
  }
  auto v = ag::leaf(Tensor<T>(std::move(shape)), true);
  params_.push_back({name, group, v});
  init_.emplace_back(init, scale);
  return v;
}

template <typename T>
typename Model<T>::DWSep Model<T>::make_dwsep(const std::string& prefix, const std::string& group,
                                              std::size_t cin, std::size_t cout, std::size_t kernel,
                                              std::size_t stride) {
  DWSep p;
  const double s_dw = 1.0 / std::sqrt(static_cast<double>(kernel));
  const double s_pw = 1.0 / std::sqrt(static_cast<double>(cin));
  p.dw_w = add_param(prefix + ".dw.weight", group, {cin, 1, kernel}, Init::uniform, s_dw);
  p.dw_b = add_param(prefix + ".dw.bias", group, {cin}, Init::uniform, s_dw);
  p.pw_w = add_param(prefix + ".pw.weight", group, {cin, cout}, Init::uniform, s_pw);
  p.pw_b = add_param(prefix + ".pw.bias", group, {cout}, Init::uniform, s_pw);
  p.stride = stride;
  return p;
}

template <typename T>
typename Model<T>::Norm Model<T>::make_norm(const std::string& prefix, const std::string& group,
                                            std::size_t c) {
  return Norm{add_param(prefix + ".gamma", group, {c}, Init::ones, 0),
              add_param(prefix + ".beta", group, {c}, Init::zeros, 0)};
}

template <typename T>
typename Model<T>::Head Model<T>::make_head(const std::string& prefix, std::size_t c) {
  const std::string group = prefix;
  const std::size_t k = config_.head_kernel;
  const double s_conv = 1.0 / std::sqrt(static_cast<double>(c * k));
  const double s_out = 1.0 / std::sqrt(static_cast<double>(c));
  Head h;
  h.conv1_w = add_param(prefix + ".conv1.weight", group, {c, c, k}, Init::uniform, s_conv);
  h.conv1_b = add_param(prefix + ".conv1.bias", group, {c}, Init::uniform, s_conv);
  h.ln1 = make_norm(prefix + ".ln1", group, c);
  h.conv2_w = add_param(prefix + ".conv2.weight", group, {c, c, k}, Init::uniform, s_conv);
  h.conv2_b = add_param(prefix + ".conv2.bias", group, {c}, Init::uniform, s_conv);
  h.ln2 = make_norm(prefix + ".ln2", group, c);
  h.out_w = add_param(prefix + ".out.weight", group, {c, 1}, Init::uniform, s_out);
  h.out_b = add_param(prefix + ".out.bias", group, {1}, Init::uniform, s_out);
  return h;
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;
  const std::size_t d = c.d, f = c.feature_dim();
  auto us = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  embedding_ = add_param("embedding.weight", "embedding", {c.vocab_size, d}, Init::normal, us(d));

  const BlockConfig* bcfg[2] = {&c.block1, &c.block2};
  std::size_t in_dim = d;
  for (int b = 0; b < 2; ++b) {
    const BlockConfig& bc = *bcfg[b];
    const std::string prefix = "encoder.block" + std::to_string(b + 1);
    const std::size_t w = bc.out_dim, e = bc.ffn_expansion * w, k = bc.merge_kernel;
    Block& blk = blocks_[b];
    blk.heads = bc.heads;
    blk.merge = make_dwsep(prefix + ".merge", prefix, in_dim, w, k, bc.merge_stride);
    blk.wq = add_param(prefix + ".attn.wq", prefix, {w, w}, Init::uniform, us(w));
    blk.wk = add_param(prefix + ".attn.wk", prefix, {w, w}, Init::uniform, us(w));
    blk.wv = add_param(prefix + ".attn.wv", prefix, {w, w}, Init::uniform, us(w));
    blk.wo = add_param(prefix + ".attn.wo", prefix, {w, w}, Init::uniform, us(w));
    blk.ln1 = make_norm(prefix + ".ln1", prefix, w);
    blk.ffn_in_w = add_param(prefix + ".ffn.in.weight", prefix, {w, e}, Init::uniform, us(w));
    blk.ffn_in_b = add_param(prefix + ".ffn.in.bias", prefix, {e}, Init::uniform, us(w));
    blk.ffn_dw_w = add_param(prefix + ".ffn.dw.weight", prefix, {e, 1, k}, Init::uniform, us(k));
    blk.ffn_dw_b = add_param(prefix + ".ffn.dw.bias", prefix, {e}, Init::uniform, us(k));
    blk.ffn_out_w = add_param(prefix + ".ffn.out.weight", prefix, {e, w}, Init::uniform, us(e));
    blk.ffn_out_b = add_param(prefix + ".ffn.out.bias", prefix, {w}, Init::uniform, us(e));
    blk.ln2 = make_norm(prefix + ".ln2", prefix, w);
    in_dim = w;
  }

  const std::size_t b2 = c.block2.out_dim, ku = c.upsample_kernel;
  up1_w_ = add_param("fuser.up1.weight", "phoneme_fuser", {f, f}, Init::uniform, us(f));
  up1_b_ = add_param("fuser.up1.bias", "phoneme_fuser", {f}, Init::uniform, us(f));
  up2_w_ = add_param("fuser.up2.weight", "phoneme_fuser", {b2, f}, Init::uniform, us(b2));
  up2_b_ = add_param("fuser.up2.bias", "phoneme_fuser", {f}, Init::uniform, us(b2));
  deconv_w_ = add_param("fuser.up2.deconv.weight", "phoneme_fuser", {f, f, ku}, Init::uniform, us(f * ku));
  deconv_b_ = add_param("fuser.up2.deconv.bias", "phoneme_fuser", {f}, Init::uniform, us(f * ku));
  fuse_w_ = add_param("fuser.fuse.weight", "phoneme_fuser", {2 * f, f}, Init::uniform, us(2 * f));
  fuse_b_ = add_param("fuser.fuse.bias", "phoneme_fuser", {f}, Init::uniform, us(2 * f));

  pitch_head_ = make_head("acoustic.pitch", c.head_hidden);
  energy_head_ = make_head("acoustic.energy", c.head_hidden);
  duration_head_ = make_head("acoustic.duration", c.head_hidden);
  pitch_table_ = add_param("acoustic.pitch_embedding.weight", "acoustic.embeddings", {c.n_bins, f},
                           Init::normal, us(f));
  energy_table_ = add_param("acoustic.energy_embedding.weight", "acoustic.embeddings", {c.n_bins, f},
                            Init::normal, us(f));

  for (std::size_t i = 0; i < c.decoder_blocks; ++i) {
    const std::string prefix = "decoder.block" + std::to_string(i + 1);
    DecoderBlock db;
    db.lin_w = add_param(prefix + ".linear.weight", "decoder", {d, d}, Init::uniform, us(d));
    db.lin_b = add_param(prefix + ".linear.bias", "decoder", {d}, Init::uniform, us(d));
    db.ln0 = make_norm(prefix + ".ln0", "decoder", d);
    db.conv1 = make_dwsep(prefix + ".conv1", "decoder", d, d, c.decoder_kernel, 1);
    db.ln1 = make_norm(prefix + ".ln1", "decoder", d);
    db.conv2 = make_dwsep(prefix + ".conv2", "decoder", d, d, c.decoder_kernel, 1);
    db.ln2 = make_norm(prefix + ".ln2", "decoder", d);
    decoder_.push_back(std::move(db));
  }
  mel_w_ = add_param("decoder.out.weight", "decoder", {d, c.n_mels}, Init::uniform, us(d));
  mel_b_ = add_param("decoder.out.bias", "decoder", {c.n_mels}, Init::uniform, us(d));

  pitch_bounds_ = c.pitch_boundaries();
  energy_bounds_ = c.energy_boundaries();
  initialize(seed);
}

template <typename T>
void Model<T>::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].var->value;
    const auto [kind, s] = init_[i];
    for (auto& v : t.data()) {
      switch (kind) {
        case Init::uniform:
          v = static_cast<T>(rng.uniform(-s, s));
          break;
        case Init::ones:
          v = T(1);
          break;
        case Init::zeros:
          v = T(0);
          break;
        case Init::normal:
          v = static_cast<T>(rng.normal() * s);
          break;
      }
    }
  }
}

template <typename T>
Var<T> Model<T>::parameter(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.var;
  }
  throw ConfigError("no parameter named " + std::string(name));
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->value.size();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.var->zero_grad();
}

template <typename T>
Var<T> Model<T>::conv_time(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
                           const ops::Conv1dParams& p) const {
  return ag::transpose(tape, ag::conv1d(tape, ag::transpose(tape, x), w, b, p));
}

template <typename T>
Var<T> Model<T>::dwsep(Tape<T>& tape, const DWSep& p, const Var<T>& x) const {
  const std::size_t cin = x->value.cols(), k = p.dw_w->value.dim(2);
  Var<T> depthwise = conv_time(tape, x, p.dw_w, p.dw_b, {p.stride, (k - 1) / 2, cin});
  return ag::linear(tape, depthwise, p.pw_w, p.pw_b);
}

template <typename T>
Var<T> Model<T>::norm(Tape<T>& tape, const Norm& n, const Var<T>& x) const {
  return ag::layer_norm(tape, x, n.gamma, n.beta, static_cast<T>(config_.ln_eps));
}

template <typename T>
Var<T> Model<T>::embed(Tape<T>& tape, const PhonemeSequence& ids) const {
  if (ids.ids.empty()) throw ShapeError("phoneme sequence must contain at least one token");
  return ag::gather_rows(tape, embedding_, ids.ids);
}

template <typename T>
Var<T> Model<T>::transformer_block(Tape<T>& tape, int index, const Var<T>& x) const {
  const Block& b = blocks_[index];
  const std::size_t expected = b.merge.dw_w->value.dim(0);
  if (x->value.ndim() != 2 || x->value.cols() != expected) {
    throw ShapeError("transformer block " + std::to_string(index + 1) + " expects width " +
                     std::to_string(expected) + ", got " + shape_str(x->value.shape()));
  }
  Var<T> u = dwsep(tape, b.merge, x);
  Var<T> a = norm(tape, b.ln1, ag::add(tape, u, ag::self_attention(tape, u, b.wq, b.wk, b.wv, b.wo, b.heads)));
  const std::size_t k = b.ffn_dw_w->value.dim(2), e = b.ffn_dw_w->value.dim(0);
  Var<T> h = ag::linear(tape, a, b.ffn_in_w, b.ffn_in_b);
  h = conv_time(tape, h, b.ffn_dw_w, b.ffn_dw_b, {1, (k - 1) / 2, e});
  h = ag::activation(tape, ops::Activation::gelu, h);
  h = ag::linear(tape, h, b.ffn_out_w, b.ffn_out_b);
  return norm(tape, b.ln2, ag::add(tape, a, h));
}

template <typename T>
EncoderTrace<T> Model<T>::encode(Tape<T>& tape, const PhonemeSequence& ids) const {
  EncoderTrace<T> tr;
  const std::size_t n = ids.size();
  tr.embedded = embed(tape, ids);
  tr.block1 = transformer_block(tape, 0, tr.embedded);
  tr.block2 = transformer_block(tape, 1, tr.block1);
  // Block 1 already has the target N x d/4 shape, so its transposed conv is the identity.
  tr.up1 = ag::linear(tape, tr.block1, up1_w_, up1_b_);
  Var<T> up2 = ag::linear(tape, tr.block2, up2_w_, up2_b_);
  up2 = ag::transpose(tape, ag::conv1d_transposed(tape, ag::transpose(tape, up2), deconv_w_, deconv_b_,
                                                   config_.upsample_kernel));
  tr.up2 = ag::head_rows(tape, up2, n);
  tr.fused = ag::linear(tape, ag::concat_cols(tape, std::vector<Var<T>>{tr.up1, tr.up2}), fuse_w_, fuse_b_);
  return tr;
}

template <typename T>
Var<T> Model<T>::head_hidden(Tape<T>& tape, const Head& h, const Var<T>& x) const {
  const std::size_t pad = (config_.head_kernel - 1) / 2;
  Var<T> y = conv_time(tape, x, h.conv1_w, h.conv1_b, {1, pad, 1});
  y = ag::activation(tape, ops::Activation::relu, norm(tape, h.ln1, y));
  y = conv_time(tape, y, h.conv2_w, h.conv2_b, {1, pad, 1});
  return ag::activation(tape, ops::Activation::relu, norm(tape, h.ln2, y));
}

template <typename T>
AcousticVars<T> Model<T>::acoustic(Tape<T>& tape, const Var<T>& features,
                                   const TeacherSignals* teacher) const {
  const std::size_t n = features->value.rows();
  if (features->value.ndim() != 2 || features->value.cols() != config_.feature_dim()) {
    throw ShapeError("acoustic heads expect width " + std::to_string(config_.feature_dim()) + ", got " +
                     shape_str(features->value.shape()));
  }
  AcousticVars<T> a;
  Var<T> hp = head_hidden(tape, pitch_head_, features);
  a.pitch = ag::linear(tape, hp, pitch_head_.out_w, pitch_head_.out_b);
  Var<T> he = head_hidden(tape, energy_head_, features);
  a.energy = ag::linear(tape, he, energy_head_.out_w, energy_head_.out_b);
  Var<T> hd = head_hidden(tape, duration_head_, features);
  a.duration = ag::activation(tape, ops::Activation::relu,
                              ag::linear(tape, hd, duration_head_.out_w, duration_head_.out_b));
  a.z_duration = hd;

  std::vector<std::size_t> pbins(n), ebins(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = teacher ? teacher->pitch_hz.at(i)
                             : config_.pitch_mean + config_.pitch_std * static_cast<double>(a.pitch->value[i]);
    const double e = teacher ? teacher->energy.at(i)
                             : config_.energy_mean + config_.energy_std * static_cast<double>(a.energy->value[i]);
    pbins[i] = bin_index(pitch_bounds_, p);
    ebins[i] = bin_index(energy_bounds_, e);
  }
  a.z_pitch = ag::gather_rows(tape, pitch_table_, pbins);
  a.z_energy = ag::gather_rows(tape, energy_table_, ebins);
  return a;
}

template <typename T>
Var<T> Model<T>::fuse(Tape<T>& tape, const Var<T>& features, const AcousticVars<T>& a) const {
  return ag::concat_cols(tape, std::vector<Var<T>>{features, a.z_pitch, a.z_energy, a.z_duration});
}

template <typename T>
Var<T> Model<T>::decode(Tape<T>& tape, const Var<T>& upsampled) const {
  if (upsampled->value.ndim() != 2 || upsampled->value.rows() == 0 || upsampled->value.cols() != config_.d) {
    throw ShapeError("mel decoder expects M x " + std::to_string(config_.d) + " with M >= 1, got " +
                     shape_str(upsampled->value.shape()));
  }
  const auto tanh = ops::Activation::tanh;
  Var<T> h = upsampled;
  for (const auto& b : decoder_) {
    h = norm(tape, b.ln0, ag::activation(tape, tanh, ag::linear(tape, h, b.lin_w, b.lin_b)));
    h = norm(tape, b.ln1, ag::activation(tape, tanh, dwsep(tape, b.conv1, h)));
    h = norm(tape, b.ln2, ag::activation(tape, tanh, dwsep(tape, b.conv2, h)));
  }
  return ag::linear(tape, h, mel_w_, mel_b_);
}

template <typename T>
AcousticPrediction<T> Model<T>::to_prediction(const AcousticVars<T>& a) const {
  AcousticPrediction<T> p;
  const std::size_t n = a.pitch->value.rows();
  p.y_pitch = Tensor<T>({n});
  p.y_energy = Tensor<T>({n});
  p.y_duration = Tensor<T>({n});
  for (std::size_t i = 0; i < n; ++i) {
    p.y_pitch[i] = static_cast<T>(config_.pitch_mean + config_.pitch_std * a.pitch->value[i]);
    p.y_energy[i] = static_cast<T>(config_.energy_mean + config_.energy_std * a.energy->value[i]);
    p.y_duration[i] = a.duration->value[i];
  }
  p.z_pitch = a.z_pitch->value;
  p.z_energy = a.z_energy->value;
  p.z_duration = a.z_duration->value;
  return p;
}

template <typename T>
SynthesisResult<T> Model<T>::synthesize(const PhonemeSequence& ids, double duration_scale) const {
  Tape<T> tape(false);
  EncoderTrace<T> enc = encode(tape, ids);
  AcousticVars<T> a = acoustic(tape, enc.fused);
  Var<T> fused = fuse(tape, enc.fused, a);
  std::vector<double> dur(a.duration->value.data().begin(), a.duration->value.data().end());
  SynthesisResult<T> out;
  out.frames_per_phoneme = duration_to_frames(dur, duration_scale, config_.max_duration);
  Var<T> up = length_regulate(tape, fused, out.frames_per_phoneme);
  Var<T> mel = decode(tape, up);
  out.mel.frames = mel->value.template cast<float>();
  out.acoustic = to_prediction(a);
  return out;
}

template <typename T>
TrainForward<T> Model<T>::forward_train(Tape<T>& tape, const PhonemeSequence& ids,
                                        const TeacherSignals& teacher) const {
  const std::size_t n = ids.size();
  if (teacher.durations.size() != n || teacher.pitch_hz.size() != n || teacher.energy.size() != n) {
    throw AlignmentError("teacher signals must have one entry per phoneme (" + std::to_string(n) + ")");
  }
  EncoderTrace<T> enc = encode(tape, ids);
  TrainForward<T> out;
  out.acoustic = acoustic(tape, enc.fused, &teacher);
  Var<T> fused = fuse(tape, enc.fused, out.acoustic);
  std::vector<std::size_t> counts(teacher.durations.begin(), teacher.durations.end());
  Var<T> up = length_regulate(tape, fused, counts);
  out.mel = decode(tape, up);
  return out;
}

template Var<float> length_regulate(Tape<float>&, const Var<float>&, const std::vector<std::size_t>&);
template Var<double> length_regulate(Tape<double>&, const Var<double>&, const std::vector<std::size_t>&);
template class Model<float>;
template class Model<double>;

}  // namespace es
