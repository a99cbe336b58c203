#include "efficientspeech/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <set>

#include "efficientspeech/gradcheck.hpp"
#include "efficientspeech/rng.hpp"

namespace es {

using ag::Tape;
using ag::Var;

std::size_t TrainSample::total_frames() const {
  return std::accumulate(durations.begin(), durations.end(), std::size_t{0});
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(lr > 0)) fail("lr must be positive");
  if (total_epochs == 0) fail("total_epochs must be positive");
  if (warmup_epochs >= total_epochs) fail("warmup_epochs must be smaller than total_epochs");
  if (batch_size == 0) fail("batch_size must be positive");
  if (weight_decay < 0) fail("weight_decay must be non-negative");
  if (!(grad_clip_norm > 0)) fail("grad_clip_norm must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(weights.mel > 0 && weights.pitch > 0 && weights.energy > 0 && weights.duration > 0)) {
    fail("loss weights must be positive");
  }
}

void TrainConfig::write(KeyValues& kv) const {
  kv.set("lr", lr);
  kv.set("warmup_epochs", warmup_epochs);
  kv.set("total_epochs", total_epochs);
  kv.set("batch_size", batch_size);
  kv.set("weight_decay", weight_decay);
  kv.set("grad_clip_norm", grad_clip_norm);
  kv.set("beta1", beta1);
  kv.set("beta2", beta2);
  kv.set("adam_eps", adam_eps);
  kv.set("alpha", weights.mel);
  kv.set("beta", weights.pitch);
  kv.set("gamma", weights.energy);
  kv.set("lambda", weights.duration);
  kv.set("seed", static_cast<long long>(seed));
  kv.set("checkpoint_every", checkpoint_every);
}

TrainConfig TrainConfig::read(const KeyValues& kv) {
  const std::vector<std::string> keys = {"lr",    "warmup_epochs", "total_epochs", "batch_size", "weight_decay",
                                         "grad_clip_norm", "beta1", "beta2", "adam_eps", "alpha", "beta",
                                         "gamma", "lambda", "seed", "checkpoint_every"};
  kv.require(keys);
  kv.reject_unknown(std::set<std::string>(keys.begin(), keys.end()));
  TrainConfig c;
  c.lr = kv.get_double("lr");
  c.warmup_epochs = kv.get_size("warmup_epochs");
  c.total_epochs = kv.get_size("total_epochs");
  c.batch_size = kv.get_size("batch_size");
  c.weight_decay = kv.get_double("weight_decay");
  c.grad_clip_norm = kv.get_double("grad_clip_norm");
  c.beta1 = kv.get_double("beta1");
  c.beta2 = kv.get_double("beta2");
  c.adam_eps = kv.get_double("adam_eps");
  c.weights.mel = kv.get_double("alpha");
  c.weights.pitch = kv.get_double("beta");
  c.weights.energy = kv.get_double("gamma");
  c.weights.duration = kv.get_double("lambda");
  c.seed = static_cast<std::uint64_t>(kv.get_size("seed"));
  c.checkpoint_every = kv.get_size("checkpoint_every");
  c.validate();
  return c;
}

template <typename T>
Loss<T> compute_loss(Tape<T>& tape, const TrainForward<T>& pred, const TrainSample& sample, const LossWeights& w,
                     const ModelConfig& config) {
  const std::size_t n = sample.ids.size();
  if (sample.durations.size() != n || sample.pitch.size() != n || sample.energy.size() != n) {
    throw AlignmentError("training sample has inconsistent per-phoneme target lengths");
  }
  if (pred.mel->value.shape() != sample.mel.shape()) {
    throw AlignmentError("predicted mel " + shape_str(pred.mel->value.shape()) + " does not match target " +
                         shape_str(sample.mel.shape()) + "; durations and frames are out of sync");
  }
  Tensor<T> mel_target = sample.mel.template cast<T>();
  Tensor<T> pitch({n, 1}), energy({n, 1}), duration({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    pitch[i] = static_cast<T>((sample.pitch[i] - config.pitch_mean) / config.pitch_std);
    energy[i] = static_cast<T>((sample.energy[i] - config.energy_mean) / config.energy_std);
    duration[i] = static_cast<T>(sample.durations[i]);
  }
  const double cells = static_cast<double>(mel_target.size()), count = static_cast<double>(n);
  Var<T> l_mel = ag::scale(tape, ag::sum_abs_error(tape, pred.mel, mel_target), static_cast<T>(1.0 / cells));
  Var<T> l_p = ag::scale(tape, ag::sum_squared_error(tape, pred.acoustic.pitch, pitch), static_cast<T>(1.0 / count));
  Var<T> l_e = ag::scale(tape, ag::sum_squared_error(tape, pred.acoustic.energy, energy), static_cast<T>(1.0 / count));
  Var<T> l_d =
      ag::scale(tape, ag::sum_squared_error(tape, pred.acoustic.duration, duration), static_cast<T>(1.0 / count));
  Loss<T> out;
  out.total = ag::add(tape,
                      ag::add(tape, ag::scale(tape, l_mel, static_cast<T>(w.mel)), ag::scale(tape, l_p, static_cast<T>(w.pitch))),
                      ag::add(tape, ag::scale(tape, l_e, static_cast<T>(w.energy)), ag::scale(tape, l_d, static_cast<T>(w.duration))));
  out.terms = {static_cast<double>(l_mel->value[0]), static_cast<double>(l_p->value[0]),
               static_cast<double>(l_e->value[0]), static_cast<double>(l_d->value[0]),
               static_cast<double>(out.total->value[0])};
  return out;
}

double lr_at(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch) {
  const std::size_t warmup = config.warmup_epochs * steps_per_epoch;
  const std::size_t total = config.total_epochs * steps_per_epoch;
  if (step < warmup) return config.lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup + 1) return config.lr;
  const double t = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - 1 - warmup));
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
void adamw_step(const std::vector<NamedParam<T>>& params, AdamState<T>& state, double lr, const AdamOptions& opt) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.var->value.shape(), T(0));
      state.v.emplace_back(p.var->value.shape(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].var->value;
    const auto& grad = params[i].var->grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.shape() != value.shape()) throw ShapeError("optimizer state shape mismatch for " + params[i].name);
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      double p = static_cast<double>(value[j]);
      p *= 1.0 - lr * opt.weight_decay;
      const double mj = opt.beta1 * static_cast<double>(m[j]) + (1 - opt.beta1) * g;
      const double vj = opt.beta2 * static_cast<double>(v[j]) + (1 - opt.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + opt.eps);
      value[j] = static_cast<T>(p);
    }
  }
}

template <typename T>
double global_grad_norm(const std::vector<NamedParam<T>>& params) {
  double acc = 0;
  for (const auto& p : params) {
    for (T g : p.var->grad.data()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

template <typename T>
double clip_grad_norm(const std::vector<NamedParam<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      for (auto& g : p.var->grad.data()) g *= s;
    }
  }
  return norm;
}

namespace {

std::vector<double> fit_length(std::vector<double> v, std::size_t n) {
  const double last = v.empty() ? 0.0 : v.back();
  v.resize(n, last);
  return v;
}

}  // namespace

TrainSample extract_targets(const dsp::Waveform& wave, const PhonemeSequence& ids,
                            const std::vector<std::size_t>& durations, const dsp::SpectrogramConfig& cfg,
                            const ExtractOptions& opt) {
  if (durations.size() != ids.size()) {
    throw AlignmentError("got " + std::to_string(durations.size()) + " durations for " + std::to_string(ids.size()) +
                         " phonemes");
  }
  const std::size_t total = std::accumulate(durations.begin(), durations.end(), std::size_t{0});
  if (total == 0) throw EmptyUtteranceError("durations sum to zero frames");
  MelSpectrogram mel = dsp::mel_spectrogram(wave, cfg);
  const std::size_t frames = mel.num_frames();
  const std::size_t diff = frames > total ? frames - total : total - frames;
  if (diff > opt.max_adjust) {
    throw AlignmentError("waveform has " + std::to_string(frames) + " frames but durations sum to " +
                         std::to_string(total));
  }
  TrainSample s;
  s.ids = ids;
  s.durations = durations;
  s.mel = Tensor<float>({total, cfg.n_mels});
  for (std::size_t t = 0; t < total; ++t) {
    const std::size_t src = std::min(t, frames - 1);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) s.mel(t, m) = mel.frames(src, m);
  }
  const auto energy = fit_length(dsp::frame_energy(wave, cfg), total);
  const auto f0 = fit_length(dsp::estimate_f0(wave, cfg, opt.f0), total);
  std::size_t start = 0;
  for (std::size_t d : durations) {
    double e = 0, p = 0;
    std::size_t voiced = 0;
    for (std::size_t t = start; t < start + d; ++t) {
      e += energy[t];
      if (f0[t] > 0) {
        p += f0[t];
        ++voiced;
      }
    }
    s.energy.push_back(d ? e / static_cast<double>(d) : 0.0);
    s.pitch.push_back(voiced ? p / static_cast<double>(voiced) : 0.0);
    start += d;
  }
  return s;
}

double toy_fundamental(std::size_t p) {
  static const double f[kToyPhonemes] = {120, 145, 170, 195, 220, 245, 270, 300, 325, 350, 375, 400};
  return f[p % kToyPhonemes];
}

std::vector<ToyUtterance> generate_toy_dataset(std::size_t n_samples, std::uint64_t seed,
                                               const dsp::SpectrogramConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  const double sr = static_cast<double>(cfg.sample_rate);
  const std::size_t hop = cfg.hop_length;
  const auto fade = static_cast<std::size_t>(std::lround(0.005 * sr));
  std::vector<ToyUtterance> out;
  for (std::size_t u = 0; u < n_samples; ++u) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(3, 8));
    std::vector<std::size_t> phones(n), ids(n), durations(n);
    for (std::size_t i = 0; i < n; ++i) {
      phones[i] = static_cast<std::size_t>(rng.uniform_int(0, kToyPhonemes - 1));
      ids[i] = kToyFirstId + phones[i];
      durations[i] = static_cast<std::size_t>(rng.uniform_int(4, 12));
    }
    const std::size_t frames = std::accumulate(durations.begin(), durations.end(), std::size_t{0});
    dsp::Waveform wave;
    wave.sample_rate = cfg.sample_rate;
    const std::size_t len = frames * hop;
    std::vector<double> x(len, 0.0);
    // Frame t is centred on sample t*hop, so inner boundaries sit half a hop early.
    std::size_t cum = 0;
    std::size_t begin = 0;
    for (std::size_t i = 0; i < n; ++i) {
      cum += durations[i];
      const std::size_t end = i + 1 == n ? len : cum * hop - hop / 2;
      const double f = toy_fundamental(phones[i]);
      const double amp = 0.3 + 0.04 * static_cast<double>(phones[i] % 6);
      // Each segment overlaps its neighbours by half a fade on either side.
      const std::size_t lo = begin >= fade / 2 ? begin - fade / 2 : 0;
      const std::size_t hi = std::min(len, end + fade / 2);
      for (std::size_t k = lo; k < hi; ++k) {
        double w = 1.0;
        if (k < begin + fade / 2) w = static_cast<double>(k - lo) / static_cast<double>(begin + fade / 2 - lo);
        if (k + fade / 2 >= end) w = std::min(w, static_cast<double>(hi - k) / static_cast<double>(hi - (end - fade / 2)));
        x[k] += w * amp * std::cos(2 * std::numbers::pi * f * static_cast<double>(k) / sr);
      }
      begin = end;
    }
    wave.samples.assign(x.begin(), x.end());
    ToyUtterance utt;
    utt.sample = extract_targets(wave, PhonemeSequence(ids), durations, cfg);
    utt.wave = std::move(wave);
    out.push_back(std::move(utt));
  }
  return out;
}

void fit_acoustic_statistics(ModelConfig& config, const std::vector<TrainSample>& data) {
  std::vector<double> pitch, energy;
  for (const auto& s : data) {
    for (double p : s.pitch) {
      if (p > 0) pitch.push_back(p);
    }
    energy.insert(energy.end(), s.energy.begin(), s.energy.end());
  }
  auto moments = [](const std::vector<double>& v, double& mean, double& stddev) {
    if (v.empty()) return;
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    stddev = var > 1e-12 ? std::sqrt(var) : 1.0;
  };
  moments(pitch, config.pitch_mean, config.pitch_std);
  moments(energy, config.energy_mean, config.energy_std);
  if (!energy.empty()) {
    auto [lo, hi] = std::minmax_element(energy.begin(), energy.end());
    config.energy_min = *lo;
    config.energy_max = *hi > *lo ? *hi : *lo + 1.0;
  }
}

void write_log_header(std::ostream& out) { out << "epoch,step,lr,l_mel,l_p,l_e,l_d,total,grad_norm\n"; }

void write_log_row(std::ostream& out, const TrainLogRow& r) {
  out << r.epoch << ',' << r.step << ',' << format_double(r.lr) << ',' << format_double(r.loss.mel) << ','
      << format_double(r.loss.pitch) << ',' << format_double(r.loss.energy) << ',' << format_double(r.loss.duration)
      << ',' << format_double(r.loss.total) << ',' << format_double(r.grad_norm) << '\n';
}

namespace {

template <typename T>
std::string describe_non_finite(const Model<T>& model, const Tape<T>& tape) {
  for (const auto& p : model.parameters()) {
    if (!p.var->value.all_finite()) return "parameter " + p.name;
  }
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!nodes[i]->value.all_finite()) return "output of " + std::string(nodes[i]->op) + " (tape node " + std::to_string(i) + ")";
  }
  return "loss";
}

}  // namespace

std::vector<TrainLogRow> train(Model<float>& model, const std::vector<TrainSample>& data, const TrainConfig& config,
                               AdamState<float>& state, const TrainHooks& hooks) {
  config.validate();
  if (data.empty()) throw DataError("training set is empty");
  const std::size_t batch = std::min(config.batch_size, data.size());
  const std::size_t spe = (data.size() + batch - 1) / batch;
  const AdamOptions opt{config.beta1, config.beta2, config.adam_eps, config.weight_decay};
  const auto& params = model.parameters();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(config.seed);
  std::vector<TrainLogRow> log;
  if (hooks.csv && state.step == 0) write_log_header(*hooks.csv);

  for (std::size_t epoch = 0; epoch < config.total_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    bool stepped = false;
    for (std::size_t b = 0; b < spe; ++b) {
      const std::size_t step = epoch * spe + b;
      if (step < state.step) continue;
      stepped = true;
      model.zero_grad();
      const std::size_t first = b * batch, last = std::min(order.size(), first + batch);
      const double share = 1.0 / static_cast<double>(last - first);
      TrainLogRow row;
      row.epoch = epoch;
      row.step = step;
      for (std::size_t k = first; k < last; ++k) {
        const TrainSample& s = data[order[k]];
        Tape<float> tape;
        auto fwd = model.forward_train(tape, s.ids, s.teacher());
        auto loss = compute_loss(tape, fwd, s, config.weights, model.config());
        if (!std::isfinite(loss.terms.total)) {
          throw NumericError("non-finite loss at step " + std::to_string(step) + ": first non-finite tensor is " +
                             describe_non_finite(model, tape));
        }
        tape.backward(ag::scale(tape, loss.total, static_cast<float>(share)));
        row.loss.mel += share * loss.terms.mel;
        row.loss.pitch += share * loss.terms.pitch;
        row.loss.energy += share * loss.terms.energy;
        row.loss.duration += share * loss.terms.duration;
        row.loss.total += share * loss.terms.total;
      }
      row.grad_norm = clip_grad_norm(params, config.grad_clip_norm);
      if (!std::isfinite(row.grad_norm)) {
        for (const auto& p : params) {
          if (!p.var->grad.all_finite()) {
            throw NumericError("non-finite gradient at step " + std::to_string(step) + " in parameter " + p.name);
          }
        }
      }
      row.lr = lr_at(step, config, spe);
      adamw_step(params, state, row.lr, opt);
      if (hooks.csv) write_log_row(*hooks.csv, row);
      log.push_back(row);
    }
    if (stepped && hooks.checkpoint && config.checkpoint_every && (epoch + 1) % config.checkpoint_every == 0) {
      hooks.checkpoint(epoch + 1, model, state);
    }
  }
  return log;
}

GradientCheckResult gradient_check(Model<double>& model, const TrainSample& sample, const LossWeights& weights,
                                   double step) {
  const TeacherSignals teacher = sample.teacher();
  auto loss_value = [&] {
    Tape<double> tape(false);
    return compute_loss(tape, model.forward_train(tape, sample.ids, teacher), sample, weights, model.config())
        .total->value[0];
  };
  model.zero_grad();
  {
    Tape<double> tape;
    auto loss = compute_loss(tape, model.forward_train(tape, sample.ids, teacher), sample, weights, model.config());
    tape.backward(loss.total);
  }
  GradientCheckResult r;
  for (const auto& p : model.parameters()) {
    const auto numeric = richardson_gradient<double>(loss_value, p.var->value.data(), step);
    double worst = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double analytic = p.var->grad.empty() ? 0.0 : p.var->grad[i];
      worst = std::max(worst, relative_error(analytic, numeric[i], 1e-6));
    }
    r.per_parameter.emplace_back(p.name, worst);
    if (worst >= r.max_relative_error) {
      r.max_relative_error = worst;
      r.worst_parameter = p.name;
    }
  }
  return r;
}

template Loss<float> compute_loss(Tape<float>&, const TrainForward<float>&, const TrainSample&, const LossWeights&,
                                  const ModelConfig&);
template Loss<double> compute_loss(Tape<double>&, const TrainForward<double>&, const TrainSample&, const LossWeights&,
                                   const ModelConfig&);
template void adamw_step(const std::vector<NamedParam<float>>&, AdamState<float>&, double, const AdamOptions&);
template void adamw_step(const std::vector<NamedParam<double>>&, AdamState<double>&, double, const AdamOptions&);
template double global_grad_norm(const std::vector<NamedParam<float>>&);
template double global_grad_norm(const std::vector<NamedParam<double>>&);
template double clip_grad_norm(const std::vector<NamedParam<float>>&, double);
template double clip_grad_norm(const std::vector<NamedParam<double>>&, double);

}  // namespace es
