#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "efficientspeech/archive.hpp"
#include "json.hpp"

using namespace es;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "es_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// A short toy training run shared by the synthesis tests.
const std::string& trained_weights() {
  static const std::string path = [] {
    const std::string p = (scratch() / "shared.esw").string();
    const Run r = invoke({"train", "--epochs", "60", "--samples", "4", "--out", p});
    REQUIRE(r.code == 0);
    return p;
  }();
  return path;
}

std::string path(const std::string& name) { return (scratch() / name).string(); }

}  // namespace

TEST_CASE("phoneme synthesis writes frames times hop samples") {
  const Run r = invoke({"synth", "--weights", trained_weights(), "--phonemes", "DH AH0 K W IH1 K", "--out",
                     path("a.wav"), "--json"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  std::size_t frames = 0;
  for (auto f : j["frames_per_phoneme"]) frames += f.get<std::size_t>();
  CHECK(j["frames"] == frames);
  CHECK(j["samples"] == frames * 256);
  CHECK(dsp::read_wav(path("a.wav")).samples.size() == frames * 256);
}

TEST_CASE("duration scale stretches the mel exactly") {
  const auto run = [&](const std::string& scale) {
    const Run r = invoke({"synth", "--weights", trained_weights(), "--ids", "2 5 9 3 7", "--duration-scale", scale,
                       "--out", path("s.wav"), "--json"});
    REQUIRE(r.code == 0);
    return json::parse(r.out);
  };
  const json one = run("1.0"), two = run("2.0");
  const LoadedModel m = load_weights(trained_weights());
  const auto pred = m.model.synthesize(PhonemeSequence({2, 5, 9, 3, 7})).acoustic.y_duration;
  std::vector<double> d(pred.data().begin(), pred.data().end());
  std::size_t expected = 0;
  for (std::size_t f : duration_to_frames(d, 2.0, m.model.config().max_duration)) expected += f;
  CHECK(two["frames"] == expected);
  const double ratio = two["seconds"].get<double>() / one["seconds"].get<double>();
  CHECK(ratio == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("text input logs the phoneme string") {
  const Run r = invoke({"synth", "--weights", trained_weights(), "--text", "the quick brown fox jumps over the lazy dog",
                     "--out", path("t.wav"), "--emit-mel", path("t.mel")});
  REQUIRE(r.code == 0);
  CHECK(r.err.find("phonemes: DH AH0 K W IH1 K B R AW1 N") != std::string::npos);
  const MelSpectrogram mel = decode_mel(read_file(path("t.mel")));
  CHECK(mel.num_mels() == 80);
  CHECK(mel.num_frames() * 256 == dsp::read_wav(path("t.wav")).samples.size());
}

TEST_CASE("synthesis usage and data errors") {
  CHECK(invoke({"synth", "--weights", trained_weights(), "--out", path("x.wav")}).code == 2);
  CHECK(invoke({"synth", "--weights", trained_weights(), "--out", path("x.wav"), "--text", "hi", "--ids", "2"}).code == 2);
  CHECK(invoke({"synth", "--weights", trained_weights(), "--out", path("x.wav"), "--text", "!!!"}).code == 3);
  CHECK(invoke({"synth", "--weights", trained_weights(), "--out", path("x.wav"), "--text", "hello",
             "--lexicon", path("missing.txt")}).code == 3);
  CHECK(invoke({"synth", "--weights", trained_weights(), "--out", path("x.wav"), "--ids", "2 900"}).code == 3);
  CHECK(invoke({"synth", "--bogus-flag"}).code == 2);
  CHECK(invoke({}).code == 2);
}

TEST_CASE("corrupted archives exit with code 3") {
  const std::string bytes = read_file(trained_weights());
  write_file(path("cut.esw"), std::string_view(bytes).substr(0, bytes.size() - 1));
  const Run r = invoke({"synth", "--weights", path("cut.esw"), "--ids", "2 3", "--out", path("x.wav")});
  CHECK(r.code == 3);
  CHECK(r.err.find("truncated") != std::string::npos);
  std::string bad = bytes;
  bad[0] = 'Z';
  write_file(path("magic.esw"), bad);
  CHECK(invoke({"profile", "--weights", path("magic.esw")}).code == 3);
}

TEST_CASE("training twice with one seed gives identical archives") {
  const std::vector<std::string> base = {"train", "--epochs", "2", "--warmup-epochs", "1", "--samples", "3", "--seed", "7"};
  auto a = base, b = base;
  a.insert(a.end(), {"--out", path("a.esw")});
  b.insert(b.end(), {"--out", path("b.esw")});
  REQUIRE(invoke(a).code == 0);
  REQUIRE(invoke(b).code == 0);
  CHECK(read_file(path("a.esw")) == read_file(path("b.esw")));
  CHECK(read_file(path("a.esw.opt")) == read_file(path("b.esw.opt")));
  const std::string log = read_file(path("a.esw.csv"));
  CHECK(log.rfind("epoch,step,lr,l_mel,l_p,l_e,l_d,total,grad_norm", 0) == 0);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  const std::vector<std::string> base = {"train", "--samples", "3", "--seed", "4", "--epochs", "4", "--warmup-epochs", "1"};
  auto full = base;
  full.insert(full.end(), {"--out", path("f.esw"), "--checkpoint-every", "2"});
  REQUIRE(invoke(full).code == 0);
  REQUIRE(fs::exists(path("f.esw.epoch2")));
  REQUIRE(fs::exists(path("f.esw.epoch2.opt")));
  auto resumed = base;
  resumed.insert(resumed.end(), {"--out", path("r.esw"), "--resume", path("f.esw.epoch2")});
  const Run r = invoke(resumed);
  REQUIRE(r.code == 0);
  CHECK(r.err.find("resuming from step 2") != std::string::npos);
  CHECK(read_file(path("r.esw")) == read_file(path("f.esw")));
  CHECK(read_file(path("r.esw.opt")) == read_file(path("f.esw.opt")));

  auto again = base;
  again.insert(again.end(), {"--out", path("r2.esw"), "--resume", path("f.esw")});
  const Run done = invoke(again);
  REQUIRE(done.code == 0);
  CHECK(done.out.find("already at step 4") != std::string::npos);
}

TEST_CASE("training config files are strict") {
  write_file(path("train.cfg"), "lr = 0.001\nwarmup_epochs = 1\n");
  const Run r = invoke({"train", "--config", path("train.cfg"), "--out", path("cfg.esw")});
  CHECK(r.code == 3);
  CHECK(r.err.find("total_epochs") != std::string::npos);
  write_file(path("bad.cfg"), "lr = 0.001\nthis line is wrong\n");
  const Run bad = invoke({"train", "--config", path("bad.cfg"), "--out", path("cfg.esw")});
  CHECK(bad.code == 3);
  CHECK(bad.err.find(":2") != std::string::npos);
}

TEST_CASE("profile doubles decoder FLOPs with twice the audio") {
  auto decoder = [](const std::string& seconds) {
    const Run r = invoke({"profile", "--config", "default", "--seconds", seconds, "--json"});
    REQUIRE(r.code == 0);
    const json j = json::parse(r.out);
    std::uint64_t d = 0;
    for (const auto& l : j["flops"]["layers"]) {
      if (l["module"] == "decoder") d += l["macs"].get<std::uint64_t>();
    }
    CHECK(j["schema"] == 1);
    return d;
  };
  CHECK(decoder("12") == 2 * decoder("6"));
  const Run text = invoke({"profile", "--config", "default"});
  CHECK(text.out.find("relative") != std::string::npos);
  CHECK(invoke({"profile"}).code == 2);
}

TEST_CASE("bench with one sample collapses its statistics") {
  const Run r = invoke({"bench", "--weights", trained_weights(), "--samples", "1", "--json", "--max-phonemes", "20"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  const auto& s = j["bench"]["mrtf"];
  CHECK(s["min"] == s["max"]);
  CHECK(s["median"] == s["min"]);
  CHECK(j["bench"]["samples"] == 1);
}
