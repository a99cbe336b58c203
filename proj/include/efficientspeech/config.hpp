#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "efficientspeech/kv.hpp"

namespace es {

struct BlockConfig {
  std::size_t out_dim = 0;
  std::size_t merge_kernel = 3;
  std::size_t merge_stride = 1;
  std::size_t heads = 1;
  std::size_t ffn_expansion = 2;
};

// Hyperparameters of the network plus the frozen acoustic statistics that travel with the
// weights (bin ranges and pitch/energy normalization used by the regression losses).
struct ModelConfig {
  std::size_t d = 128;
  std::size_t vocab_size = 71;  // 69 stress-marked ARPAbet symbols + PAD + UNK
  std::size_t n_mels = 80;
  BlockConfig block1{32, 3, 1, 1, 2};
  BlockConfig block2{64, 3, 2, 2, 2};
  std::size_t head_kernel = 3;
  std::size_t head_hidden = 32;
  std::size_t n_bins = 256;
  double pitch_min_hz = 80.0;
  double pitch_max_hz = 800.0;
  double energy_min = 0.0;
  double energy_max = 100.0;
  double pitch_mean = 0.0;
  double pitch_std = 1.0;
  double energy_mean = 0.0;
  double energy_std = 1.0;
  std::size_t decoder_blocks = 2;
  std::size_t decoder_kernel = 3;
  std::size_t upsample_kernel = 2;
  std::size_t max_duration = 50;
  double ln_eps = 1e-5;
  // Phoneme symbols for ids 2.. (ids 0 and 1 are PAD and UNK). Optional.
  std::vector<std::string> symbols;

  // Default widths derived from d: block1 d/4, block2 d/2, heads d/4.
  static ModelConfig with_width(std::size_t d, std::size_t vocab_size, std::size_t n_mels = 80);
  // d=8, vocab=6, n_bins=4, n_mels=4; used by gradient checks.
  static ModelConfig tiny();

  std::size_t feature_dim() const { return block1.out_dim; }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  // Geometric pitch and linear energy bin boundaries (n_bins - 1 each).
  std::vector<double> pitch_boundaries() const;
  std::vector<double> energy_boundaries() const;

  void write(KeyValues& kv) const;
  static ModelConfig read(const KeyValues& kv);
};

// Index of the bin containing value: number of boundaries <= value. Values below the first
// boundary map to 0 and values at or above the last map to n_bins - 1.
std::size_t bin_index(const std::vector<double>& boundaries, double value);

}  // namespace es
