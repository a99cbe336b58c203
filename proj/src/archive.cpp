#include "efficientspeech/archive.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace es {

namespace {

using Kind = ArchiveError::Kind;

constexpr std::string_view kWeightsMagic = "ESW1";
constexpr std::string_view kOptimizerMagic = "ESO1";
constexpr std::string_view kMelMagic = "ESM1";

class Writer {
 public:
  void raw(std::string_view s) { out_.append(s); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32s(std::span<const float> v) {
    for (float x : v) u32(std::bit_cast<std::uint32_t>(x));
  }
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view bytes, std::string_view what) : in_(bytes), what_(what) {}

  std::string_view raw(std::size_t n) {
    if (in_.size() - pos_ < n) {
      throw ArchiveError(Kind::truncated, std::string(what_) + " is truncated at byte " + std::to_string(in_.size()) +
                                              " (needed " + std::to_string(n) + " more at offset " +
                                              std::to_string(pos_) + ")");
    }
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(int bytes) {
    auto s = raw(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  void f32s(std::span<float> out) {
    auto s = raw(out.size() * 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[4 * i + b])) << (8 * b);
      out[i] = std::bit_cast<float>(v);
    }
  }
  std::string text() { return std::string(raw(u32())); }

  void header(std::string_view magic) {
    if (in_.size() < magic.size() || in_.substr(0, magic.size()) != magic) {
      throw ArchiveError(Kind::bad_magic, std::string(what_) + " does not start with \"" + std::string(magic) + "\"");
    }
    pos_ = magic.size();
    const std::uint32_t version = u32();
    if (version != kArchiveVersion) {
      throw ArchiveError(Kind::version_mismatch, std::string(what_) + " has format version " + std::to_string(version) +
                                                     ", expected " + std::to_string(kArchiveVersion));
    }
  }
  void finish() const {
    if (pos_ != in_.size()) {
      throw ArchiveError(Kind::shape_mismatch, std::string(what_) + " has " + std::to_string(in_.size() - pos_) +
                                                   " unexpected trailing bytes");
    }
  }

 private:
  std::string_view in_;
  std::string_view what_;
  std::size_t pos_ = 0;
};

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + format_double(v[i]);
  return s;
}

std::string config_text(const ModelConfig& model, const dsp::SpectrogramConfig& spectrogram) {
  KeyValues kv;
  model.write(kv);
  spectrogram.write(kv);
  kv.set("bins.pitch", join(model.pitch_boundaries()));
  kv.set("bins.energy", join(model.energy_boundaries()));
  return kv.to_text();
}

Shape read_shape(Reader& r) {
  const std::size_t ndim = r.u8();
  Shape s(ndim);
  for (auto& d : s) d = r.u32();
  return s;
}

void write_shape(Writer& w, const Shape& s) {
  w.u8(static_cast<std::uint8_t>(s.size()));
  for (std::size_t d : s) w.u32(static_cast<std::uint32_t>(d));
}

template <typename F>
auto config_errors_as(Kind kind, const std::string& what, F&& f) {
  try {
    return f();
  } catch (const ArchiveError&) {
    throw;
  } catch (const Error& e) {
    throw ArchiveError(kind, what + ": " + e.what());
  }
}

}  // namespace

std::string encode_weights(const Model<float>& model, const dsp::SpectrogramConfig& spectrogram) {
  Writer w;
  w.raw(kWeightsMagic);
  w.u32(kArchiveVersion);
  w.text(config_text(model.config(), spectrogram));
  const auto& params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.raw(p.name);
    w.u8(0);
    write_shape(w, p.var->value.shape());
    w.f32s(p.var->value.data());
  }
  return w.take();
}

LoadedModel decode_weights(std::string_view bytes) {
  Reader r(bytes, "weight archive");
  r.header(kWeightsMagic);
  const std::string text = r.text();
  auto [config, spectrogram] = config_errors_as(Kind::shape_mismatch, "weight archive config", [&] {
    const KeyValues kv = KeyValues::parse(text, "weight archive config");
    ModelConfig mc = ModelConfig::read(kv);
    mc.validate();
    auto sc = dsp::SpectrogramConfig::read(kv);
    if (kv.get("bins.pitch") != join(mc.pitch_boundaries()) || kv.get("bins.energy") != join(mc.energy_boundaries())) {
      throw ConfigError("bin boundaries disagree with the bin ranges");
    }
    return std::make_pair(mc, sc);
  });
  LoadedModel out{Model<float>(config, 0), spectrogram};
  std::map<std::string, std::size_t> index;
  const auto& params = out.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) index[params[i].name] = i;

  const std::uint32_t count = r.u32();
  std::set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name(r.raw(r.u16()));
    const std::uint8_t dtype = r.u8();
    const Shape shape = read_shape(r);
    if (dtype != 0) throw ArchiveError(Kind::shape_mismatch, "tensor " + name + " has unsupported dtype " + std::to_string(dtype));
    auto it = index.find(name);
    if (it == index.end()) throw ArchiveError(Kind::shape_mismatch, "archive tensor " + name + " is not part of the model");
    if (!seen.insert(name).second) throw ArchiveError(Kind::shape_mismatch, "tensor " + name + " appears twice");
    auto& value = params[it->second].var->value;
    if (shape != value.shape()) {
      throw ArchiveError(Kind::shape_mismatch, "tensor " + name + " has shape " + shape_str(shape) +
                                                   " but the config implies " + shape_str(value.shape()));
    }
    r.f32s(value.data());
  }
  if (seen.size() != params.size()) {
    for (const auto& p : params) {
      if (!seen.count(p.name)) throw ArchiveError(Kind::shape_mismatch, "archive is missing tensor " + p.name);
    }
  }
  r.finish();
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(Kind::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError(Kind::io, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArchiveError(Kind::io, "write failed for " + path);
}

void save_weights(const std::string& path, const Model<float>& model, const dsp::SpectrogramConfig& spectrogram) {
  write_file(path, encode_weights(model, spectrogram));
}

LoadedModel load_weights(const std::string& path) { return decode_weights(read_file(path)); }

std::string optimizer_path(const std::string& weights_path) { return weights_path + ".opt"; }

std::string encode_optimizer(const Model<float>& model, const AdamState<float>& state) {
  const auto& params = model.parameters();
  if (!state.m.empty() && state.m.size() != params.size()) {
    throw ShapeError("optimizer state does not match the parameter list");
  }
  Writer w;
  w.raw(kOptimizerMagic);
  w.u32(kArchiveVersion);
  w.u64(state.step);
  w.u32(static_cast<std::uint32_t>(state.m.size()));
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    w.u16(static_cast<std::uint16_t>(params[i].name.size()));
    w.raw(params[i].name);
    write_shape(w, state.m[i].shape());
    w.f32s(state.m[i].data());
    w.f32s(state.v[i].data());
  }
  return w.take();
}

AdamState<float> decode_optimizer(std::string_view bytes, const Model<float>& model) {
  Reader r(bytes, "optimizer state");
  r.header(kOptimizerMagic);
  AdamState<float> s;
  s.step = r.u64();
  const std::uint32_t count = r.u32();
  const auto& params = model.parameters();
  if (count != 0 && count != params.size()) {
    throw ArchiveError(Kind::shape_mismatch, "optimizer state holds " + std::to_string(count) + " tensors for " +
                                                 std::to_string(params.size()) + " parameters");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name(r.raw(r.u16()));
    const Shape shape = read_shape(r);
    if (name != params[i].name || shape != params[i].var->value.shape()) {
      throw ArchiveError(Kind::shape_mismatch, "optimizer tensor " + name + " " + shape_str(shape) +
                                                   " does not match parameter " + params[i].name + " " +
                                                   shape_str(params[i].var->value.shape()));
    }
    s.m.emplace_back(shape);
    s.v.emplace_back(shape);
    r.f32s(s.m.back().data());
    r.f32s(s.v.back().data());
  }
  r.finish();
  return s;
}

void save_optimizer(const std::string& path, const Model<float>& model, const AdamState<float>& state) {
  write_file(path, encode_optimizer(model, state));
}

AdamState<float> load_optimizer(const std::string& path, const Model<float>& model) {
  return decode_optimizer(read_file(path), model);
}

std::string encode_mel(const MelSpectrogram& mel, const dsp::SpectrogramConfig& spectrogram) {
  KeyValues kv;
  spectrogram.write(kv);
  Writer w;
  w.raw(kMelMagic);
  w.u32(kArchiveVersion);
  w.text(kv.to_text());
  w.u32(static_cast<std::uint32_t>(mel.num_frames()));
  w.u32(static_cast<std::uint32_t>(mel.num_mels()));
  if (!mel.frames.empty()) w.f32s(mel.frames.data());
  return w.take();
}

MelSpectrogram decode_mel(std::string_view bytes, dsp::SpectrogramConfig* spectrogram) {
  Reader r(bytes, "mel dump");
  r.header(kMelMagic);
  const std::string text = r.text();
  const auto cfg = config_errors_as(Kind::shape_mismatch, "mel dump config",
                                    [&] { return dsp::SpectrogramConfig::read(KeyValues::parse(text, "mel dump config")); });
  MelSpectrogram mel;
  mel.hop_length = cfg.hop_length;
  mel.sample_rate = cfg.sample_rate;
  const std::size_t frames = r.u32(), mels = r.u32();
  if (frames && mels) {
    mel.frames = Tensor<float>({frames, mels});
    r.f32s(mel.frames.data());
  }
  r.finish();
  if (spectrogram) *spectrogram = cfg;
  return mel;
}

}  // namespace es
