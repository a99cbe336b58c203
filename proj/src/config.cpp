#include "efficientspeech/config.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "efficientspeech/errors.hpp"

namespace es {

ModelConfig ModelConfig::with_width(std::size_t d, std::size_t vocab_size, std::size_t n_mels) {
  ModelConfig c;
  c.d = d;
  c.vocab_size = vocab_size;
  c.n_mels = n_mels;
  c.block1.out_dim = d / 4;
  c.block2.out_dim = d / 2;
  c.head_hidden = d / 4;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c = with_width(8, 6, 4);
  c.n_bins = 4;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (d == 0 || d % 4 != 0) fail("d must be a positive multiple of 4, got " + std::to_string(d));
  if (vocab_size < 2) fail("vocab_size must be >= 2 (PAD and UNK are reserved)");
  if (n_mels == 0) fail("n_mels must be positive");
  if (block1.out_dim != d / 4) fail("block1.out_dim must equal d/4");
  if (block2.out_dim != 2 * block1.out_dim) fail("block2.out_dim must equal 2 * block1.out_dim");
  if (head_hidden != d / 4) fail("head_hidden must equal d/4 so the fused features have width d");
  for (const BlockConfig* b : {&block1, &block2}) {
    if (b->heads == 0 || b->out_dim % b->heads != 0) {
      fail(std::to_string(b->heads) + " heads do not divide block width " + std::to_string(b->out_dim));
    }
    if (b->merge_kernel % 2 == 0) fail("merge kernels must be odd");
    if (b->merge_stride == 0) fail("merge stride must be >= 1");
    if (b->ffn_expansion == 0) fail("ffn expansion must be >= 1");
  }
  if (block1.merge_stride != 1) fail("block1 must keep the sequence length (stride 1)");
  if (block2.merge_stride != upsample_kernel) fail("block2 stride must match the upsampler kernel");
  if (head_kernel % 2 == 0 || decoder_kernel % 2 == 0) fail("head and decoder kernels must be odd");
  if (n_bins < 2) fail("n_bins must be >= 2");
  if (!(pitch_min_hz > 0 && pitch_max_hz > pitch_min_hz)) fail("pitch range must satisfy 0 < min < max");
  if (!(energy_max > energy_min)) fail("energy range must satisfy min < max");
  if (!(pitch_std > 0 && energy_std > 0)) fail("normalization std must be positive");
  if (max_duration == 0) fail("max_duration must be positive");
  if (!(ln_eps > 0)) fail("ln_eps must be positive");
  if (!symbols.empty() && symbols.size() + 2 != vocab_size) {
    fail("symbol table has " + std::to_string(symbols.size()) + " entries but vocab_size is " +
         std::to_string(vocab_size));
  }
}

std::vector<double> ModelConfig::pitch_boundaries() const {
  std::vector<double> b(n_bins - 1);
  if (b.size() == 1) {
    b[0] = std::sqrt(pitch_min_hz * pitch_max_hz);
    return b;
  }
  const double ratio = std::log(pitch_max_hz / pitch_min_hz);
  for (std::size_t k = 0; k < b.size(); ++k) {
    b[k] = pitch_min_hz * std::exp(ratio * static_cast<double>(k) / static_cast<double>(b.size() - 1));
  }
  b.back() = pitch_max_hz;
  return b;
}

std::vector<double> ModelConfig::energy_boundaries() const {
  std::vector<double> b(n_bins - 1);
  if (b.size() == 1) {
    b[0] = 0.5 * (energy_min + energy_max);
    return b;
  }
  for (std::size_t k = 0; k < b.size(); ++k) {
    b[k] = energy_min + (energy_max - energy_min) * static_cast<double>(k) / static_cast<double>(b.size() - 1);
  }
  return b;
}

std::size_t bin_index(const std::vector<double>& boundaries, double value) {
  if (std::isnan(value)) return 0;
  return static_cast<std::size_t>(std::upper_bound(boundaries.begin(), boundaries.end(), value) -
                                  boundaries.begin());
}

void ModelConfig::write(KeyValues& kv) const {
  kv.set("model.d", d);
  kv.set("model.vocab_size", vocab_size);
  kv.set("model.n_mels", n_mels);
  auto block = [&](const std::string& p, const BlockConfig& b) {
    kv.set(p + ".out_dim", b.out_dim);
    kv.set(p + ".merge_kernel", b.merge_kernel);
    kv.set(p + ".merge_stride", b.merge_stride);
    kv.set(p + ".heads", b.heads);
    kv.set(p + ".ffn_expansion", b.ffn_expansion);
  };
  block("model.block1", block1);
  block("model.block2", block2);
  kv.set("model.head_kernel", head_kernel);
  kv.set("model.head_hidden", head_hidden);
  kv.set("model.n_bins", n_bins);
  kv.set("model.pitch_min_hz", pitch_min_hz);
  kv.set("model.pitch_max_hz", pitch_max_hz);
  kv.set("model.energy_min", energy_min);
  kv.set("model.energy_max", energy_max);
  kv.set("model.pitch_mean", pitch_mean);
  kv.set("model.pitch_std", pitch_std);
  kv.set("model.energy_mean", energy_mean);
  kv.set("model.energy_std", energy_std);
  kv.set("model.decoder_blocks", decoder_blocks);
  kv.set("model.decoder_kernel", decoder_kernel);
  kv.set("model.upsample_kernel", upsample_kernel);
  kv.set("model.max_duration", max_duration);
  kv.set("model.ln_eps", ln_eps);
  std::string syms;
  for (std::size_t i = 0; i < symbols.size(); ++i) syms += (i ? " " : "") + symbols[i];
  kv.set("model.symbols", syms);
}

ModelConfig ModelConfig::read(const KeyValues& kv) {
  ModelConfig c;
  c.d = kv.get_size("model.d");
  c.vocab_size = kv.get_size("model.vocab_size");
  c.n_mels = kv.get_size("model.n_mels");
  auto block = [&](const std::string& p, BlockConfig& b) {
    b.out_dim = kv.get_size(p + ".out_dim");
    b.merge_kernel = kv.get_size(p + ".merge_kernel");
    b.merge_stride = kv.get_size(p + ".merge_stride");
    b.heads = kv.get_size(p + ".heads");
    b.ffn_expansion = kv.get_size(p + ".ffn_expansion");
  };
  block("model.block1", c.block1);
  block("model.block2", c.block2);
  c.head_kernel = kv.get_size("model.head_kernel");
  c.head_hidden = kv.get_size("model.head_hidden");
  c.n_bins = kv.get_size("model.n_bins");
  c.pitch_min_hz = kv.get_double("model.pitch_min_hz");
  c.pitch_max_hz = kv.get_double("model.pitch_max_hz");
  c.energy_min = kv.get_double("model.energy_min");
  c.energy_max = kv.get_double("model.energy_max");
  c.pitch_mean = kv.get_double("model.pitch_mean");
  c.pitch_std = kv.get_double("model.pitch_std");
  c.energy_mean = kv.get_double("model.energy_mean");
  c.energy_std = kv.get_double("model.energy_std");
  c.decoder_blocks = kv.get_size("model.decoder_blocks");
  c.decoder_kernel = kv.get_size("model.decoder_kernel");
  c.upsample_kernel = kv.get_size("model.upsample_kernel");
  c.max_duration = kv.get_size("model.max_duration");
  c.ln_eps = kv.get_double("model.ln_eps");
  if (kv.has("model.symbols")) {
    std::istringstream in(kv.get("model.symbols"));
    std::string s;
    while (in >> s) c.symbols.push_back(s);
  }
  c.validate();
  return c;
}

}  // namespace es
