#pragma once

#include <cstddef>
#include <vector>

#include "efficientspeech/errors.hpp"
#include "efficientspeech/tensor.hpp"

namespace es {

// Token ids of one utterance. Always non-empty.
struct PhonemeSequence {
  std::vector<std::size_t> ids;

  PhonemeSequence() = default;
  explicit PhonemeSequence(std::vector<std::size_t> v) : ids(std::move(v)) {
    if (ids.empty()) throw ShapeError("phoneme sequence must contain at least one token");
  }
  std::size_t size() const { return ids.size(); }
};

// Frame-major log-mel magnitudes (M x n_mels).
struct MelSpectrogram {
  Tensor<float> frames;
  std::size_t hop_length = 256;
  std::size_t sample_rate = 22050;

  std::size_t num_frames() const { return frames.empty() ? 0 : frames.rows(); }
  std::size_t num_mels() const { return frames.empty() ? 0 : frames.cols(); }
  double seconds() const {
    return static_cast<double>(num_frames() * hop_length) / static_cast<double>(sample_rate);
  }
};

}  // namespace es
