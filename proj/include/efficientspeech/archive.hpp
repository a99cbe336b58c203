#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "efficientspeech/dsp.hpp"
#include "efficientspeech/model.hpp"
#include "efficientspeech/training.hpp"

namespace es {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct LoadedModel {
  Model<float> model;
  dsp::SpectrogramConfig spectrogram;
};

// ESW1: magic, u32 version, u32-prefixed config text (model.*, dsp.* and bin boundaries),
// u32 tensor count, then per tensor u16 name length + name, u8 dtype (0 = f32), u8 ndim,
// u32 dims and little-endian row-major data.
std::string encode_weights(const Model<float>& model, const dsp::SpectrogramConfig& spectrogram);
// Throws ArchiveError; every tensor shape is checked against the embedded config.
LoadedModel decode_weights(std::string_view bytes);

void save_weights(const std::string& path, const Model<float>& model, const dsp::SpectrogramConfig& spectrogram);
LoadedModel load_weights(const std::string& path);

// Adam moments live in a sibling file so inference archives stay minimal.
std::string optimizer_path(const std::string& weights_path);
std::string encode_optimizer(const Model<float>& model, const AdamState<float>& state);
AdamState<float> decode_optimizer(std::string_view bytes, const Model<float>& model);
void save_optimizer(const std::string& path, const Model<float>& model, const AdamState<float>& state);
AdamState<float> load_optimizer(const std::string& path, const Model<float>& model);

// ESM1 mel dump: magic, u32 version, u32-prefixed dsp config text, u32 frames, u32 n_mels, f32 data.
std::string encode_mel(const MelSpectrogram& mel, const dsp::SpectrogramConfig& spectrogram);
MelSpectrogram decode_mel(std::string_view bytes, dsp::SpectrogramConfig* spectrogram = nullptr);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace es
