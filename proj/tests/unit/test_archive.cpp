#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "efficientspeech/archive.hpp"
#include "support.hpp"

using namespace es;

namespace {

ArchiveError::Kind kind_of(std::string_view bytes) {
  try {
    decode_weights(bytes);
  } catch (const ArchiveError& e) {
    return e.kind();
  }
  FAIL("archive decoded without error");
  return ArchiveError::Kind::io;
}

Model<float> tiny_model(std::uint64_t seed = 4) {
  ModelConfig c = ModelConfig::tiny();
  c.energy_min = 0.5;
  c.energy_max = 3.25;
  c.pitch_mean = 180;
  c.pitch_std = 40;
  c.symbols = {"AA", "B", "CH", "D"};
  return Model<float>(c, seed);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("es_archive_test_" + name);
}

}  // namespace

TEST_CASE("save load save is byte identical") {
  const Model<float> m = tiny_model();
  dsp::SpectrogramConfig sc;
  sc.n_mels = 4;
  const std::string bytes = encode_weights(m, sc);
  CHECK(bytes.substr(0, 4) == "ESW1");
  LoadedModel back = decode_weights(bytes);
  CHECK(encode_weights(back.model, back.spectrogram) == bytes);
  CHECK(back.spectrogram.n_mels == 4);
  CHECK(back.model.config().energy_max == 3.25);
  CHECK(back.model.config().symbols == m.config().symbols);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& a = m.parameters()[i].var->value;
    const auto& b = back.model.parameters()[i].var->value;
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * 4) == 0);
  }
}

TEST_CASE("archive files round trip through disk") {
  const Model<float> m = tiny_model(9);
  const auto path = temp_path("disk.esw").string();
  save_weights(path, m, {});
  CHECK(read_file(path) == encode_weights(m, {}));
  CHECK(encode_weights(load_weights(path).model, {}) == encode_weights(m, {}));
  std::filesystem::remove(path);
  try {
    load_weights(path);
    FAIL("expected an io error");
  } catch (const ArchiveError& e) {
    CHECK(e.kind() == ArchiveError::Kind::io);
  }
}

TEST_CASE("every truncation is reported as truncated") {
  const std::string bytes = encode_weights(tiny_model(), {});
  for (std::size_t cut : {std::size_t{1}, std::size_t{3}, std::size_t{100}, bytes.size() / 2, bytes.size() - 9}) {
    CHECK(kind_of(std::string_view(bytes).substr(0, bytes.size() - cut)) == ArchiveError::Kind::truncated);
  }
  CHECK(kind_of(std::string_view(bytes).substr(0, 6)) == ArchiveError::Kind::truncated);
}

TEST_CASE("corrupt headers and shapes have distinct kinds") {
  const std::string bytes = encode_weights(tiny_model(), {});
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK(kind_of(bad) == ArchiveError::Kind::bad_magic);
  CHECK(kind_of("") == ArchiveError::Kind::bad_magic);
  bad = bytes;
  bad[4] = 2;
  CHECK(kind_of(bad) == ArchiveError::Kind::version_mismatch);
  CHECK(kind_of(bytes + "x") == ArchiveError::Kind::shape_mismatch);

  // Shrink one tensor while the config still implies the original shape.
  Model<float> wide = tiny_model();
  wide.parameter("embedding.weight")->value = Tensor<float>({6, 4});
  CHECK(kind_of(encode_weights(wide, {})) == ArchiveError::Kind::shape_mismatch);

  // Config from a different width.
  ModelConfig other = ModelConfig::with_width(16, 6, 4);
  other.n_bins = 4;
  const std::string other_bytes = encode_weights(Model<float>(other, 1), {});
  const std::string tiny_bytes = encode_weights(tiny_model(), {});
  auto config_end = [](const std::string& b) {
    std::uint32_t len = 0;
    std::memcpy(&len, b.data() + 8, 4);
    return 12 + len;
  };
  const std::string spliced = other_bytes.substr(0, config_end(other_bytes)) + tiny_bytes.substr(config_end(tiny_bytes));
  CHECK(kind_of(spliced) == ArchiveError::Kind::shape_mismatch);
}

TEST_CASE("archive size is parameters plus small overhead") {
  const Model<float> m(ModelConfig{}, 1);
  const std::size_t params = m.parameter_count();
  const std::size_t size = encode_weights(m, {}).size();
  CHECK(size > 4 * params);
  CHECK(size < 4 * params + 64 * 1024);
}

TEST_CASE("optimizer state round trips in its sibling file") {
  Model<float> m = tiny_model();
  AdamState<float> state;
  Rng rng(3);
  for (const auto& p : m.parameters()) p.var->grad = test::random_tensor<float>(rng, p.var->value.shape());
  adamw_step(m.parameters(), state, 1e-3, AdamOptions{});
  adamw_step(m.parameters(), state, 1e-3, AdamOptions{});
  const std::string bytes = encode_optimizer(m, state);
  CHECK(bytes.substr(0, 4) == "ESO1");
  AdamState<float> back = decode_optimizer(bytes, m);
  CHECK(back.step == 2);
  CHECK(encode_optimizer(m, back) == bytes);
  CHECK(optimizer_path("w.esw") == "w.esw.opt");
  CHECK(decode_optimizer(encode_optimizer(m, AdamState<float>{}), m).m.empty());
  const Model<float> other(ModelConfig::with_width(16, 6, 4), 1);
  CHECK_THROWS_AS(decode_optimizer(bytes, other), ArchiveError);
  CHECK_THROWS_AS(decode_optimizer(bytes.substr(0, bytes.size() - 1), m), ArchiveError);
}

TEST_CASE("mel dumps keep frames and config") {
  MelSpectrogram mel;
  Rng rng(8);
  mel.frames = test::random_tensor<float>(rng, {7, 80});
  dsp::SpectrogramConfig sc;
  sc.hop_length = 128;
  dsp::SpectrogramConfig back_cfg;
  auto back = decode_mel(encode_mel(mel, sc), &back_cfg);
  CHECK(back.frames.shape() == mel.frames.shape());
  CHECK(back.frames.storage() == mel.frames.storage());
  CHECK(back.hop_length == 128);
  CHECK(back_cfg.hop_length == 128);
  CHECK_THROWS_AS(decode_mel("ESW1"), ArchiveError);
}
