#include <chrono>
#include <thread>

#include "doctest.h"
#include "efficientspeech/ops.hpp"
#include "efficientspeech/profiler.hpp"
#include "support.hpp"

using namespace es;
using namespace es::prof;

namespace {

MelSpectrogram stub_mel(double seconds, std::size_t mels = 80) {
  MelSpectrogram m;
  m.hop_length = 256;
  m.sample_rate = 25600;
  m.frames = Tensor<float>({static_cast<std::size_t>(seconds * 100), mels}, std::log(1e-5f));
  return m;
}

}  // namespace

TEST_CASE("default parameter count lies in the expected band") {
  const Model<float> m(ModelConfig{}, 0);
  const ParamReport r = count_parameters(m);
  CHECK(r.total >= 180000);
  CHECK(r.total <= 400000);
  CHECK(r.total == m.parameter_count());
  std::uint64_t sum = 0;
  for (const auto& g : r.groups) sum += g.count;
  CHECK(sum == r.total);
  REQUIRE(r.groups.size() >= 6);
  CHECK(r.groups.front().name == "embedding");
  CHECK(r.groups.front().count == 71 * 128);
}

TEST_CASE("tiny config matches the hand-counted ledger") {
  // embedding 6x8; block1 merge 24+8+16+2, attn 16, ln 4+4, ffn 12+16+10; block2 merge 8+12, attn 64,
  // ln 8+8, ffn 40+32+36; fuser 6+10+10+10; each head 14+4+14+4+3; bin tables 8+8;
  // decoder blocks 2x(72+16+104+16+104+16), output 36.
  const std::uint64_t hand = 48 + (50 + 16 + 8 + 38) + (20 + 64 + 16 + 108) + 36 + 3 * 39 + 16 + (2 * 328 + 36);
  CHECK(hand == 1229);
  CHECK(count_parameters(Model<double>(ModelConfig::tiny(), 0)).total == hand);
}

TEST_CASE("an embedding-only parameter list counts vocab times width") {
  std::vector<NamedParam<float>> params{{"embedding.weight", "embedding", ag::leaf(Tensor<float>({71, 128}))}};
  const ParamReport r = count_parameters(params);
  CHECK(r.total == 71 * 128);
  REQUIRE(r.groups.size() == 1);
  CHECK(r.groups[0].count == 9088);
}

TEST_CASE("parameter count does not depend on input length") {
  const Model<float> m(ModelConfig::tiny(), 1);
  const auto before = count_parameters(m).total;
  ag::Tape<float> tape(false);
  m.encode(tape, PhonemeSequence({2, 3, 4, 5, 1, 2, 3}));
  CHECK(count_parameters(m).total == before);
}

TEST_CASE("single linear layer MACs") {
  CHECK(linear_macs(1, 128, 80) == 10240);
  CHECK(conv1d_macs(10, 8, 8, 8, 3) == 240);
  CHECK(conv1d_macs(10, 8, 4, 1, 3) == 960);
  CHECK(attention_macs(3, 4) == 4 * 3 * 16 + 2 * 9 * 4);
}

TEST_CASE("six seconds of speech lands in the FLOP band") {
  const FlopReport r = count_flops(ModelConfig{}, 220, 517);
  CHECK(r.total >= 40'000'000);
  CHECK(r.total <= 150'000'000);
  std::uint64_t sum = 0;
  for (const auto& l : r.layers) sum += l.macs;
  CHECK(sum == r.total);
  CHECK(frames_for_seconds(6.0, dsp::SpectrogramConfig{}) == 517);
}

TEST_CASE("decoder FLOPs are exactly linear in frames") {
  const ModelConfig c;
  const auto a = count_flops(c, 50, 500), b = count_flops(c, 50, 1000);
  CHECK(b.module_total("decoder") == 2 * a.module_total("decoder"));
  CHECK(b.module_total("encoder.block1") == a.module_total("encoder.block1"));
}

TEST_CASE("analytic FLOPs equal the MACs executed by the kernels") {
  for (auto [config, n] : {std::pair{ModelConfig{}, std::size_t{7}}, std::pair{ModelConfig::tiny(), std::size_t{3}},
                           std::pair{ModelConfig{}, std::size_t{1}}}) {
    const Model<float> m(config, 2);
    Rng rng(n);
    std::vector<std::size_t> ids(n), dur(n);
    std::vector<double> pitch(n, 200), energy(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
      ids[i] = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(config.vocab_size) - 1));
      dur[i] = static_cast<std::size_t>(rng.uniform_int(1, 6));
    }
    const std::size_t frames = std::accumulate(dur.begin(), dur.end(), std::size_t{0});
    ops::reset_mac_count();
    ag::Tape<float> tape(false);
    m.forward_train(tape, PhonemeSequence(ids), TeacherSignals{dur, pitch, energy});
    CHECK(ops::mac_count() == count_flops(config, n, frames).total);
  }
}

TEST_CASE("sleep stub yields the expected mRTF") {
  auto gen = [](std::size_t) {
    std::this_thread::sleep_for(std::chrono::milliseconds(500));
    return stub_mel(1.0);
  };
  const BenchResult r = measure_mrtf(gen, {.samples = 1, .repeats = 1, .warmup = 0});
  CHECK(r.audio_seconds[0] == doctest::Approx(1.0));
  CHECK(r.mrtf.mean == doctest::Approx(2.0).epsilon(0.05));
  CHECK(r.mrtf.min == r.mrtf.max);
  CHECK(r.mrtf.median == r.mrtf.mean);
}

TEST_CASE("RTF never exceeds mRTF and more vocoder work lowers it") {
  const dsp::SpectrogramConfig sc;
  MelSpectrogram mel;
  {
    Rng rng(1);
    mel.frames = test::random_tensor<float>(rng, {60, 80}, -6, 0);
  }
  auto gen = [&](std::size_t) { return mel; };
  auto vocoder = [&](std::size_t iters) {
    return [&, iters](const MelSpectrogram& m) { return dsp::griffin_lim(m, sc, {.iterations = iters}).wave; };
  };
  const BenchResult fast = measure_rtf(gen, vocoder(1), {.samples = 2});
  const BenchResult slow = measure_rtf(gen, vocoder(64), {.samples = 2});
  for (const auto* r : {&fast, &slow}) {
    CHECK(r->rtf.mean <= r->mrtf.mean);
    CHECK(r->wave_seconds.size() == 2);
    for (double t : r->mel_seconds) CHECK(t > 0);
  }
  CHECK(fast.rtf.mean > slow.rtf.mean);
  CHECK(slow.audio_seconds[0] == doctest::Approx(60.0 * 256 / 22050));
}

TEST_CASE("zero-cost vocoder leaves RTF at mRTF") {
  auto gen = [](std::size_t) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    return stub_mel(1.0);
  };
  auto vocoder = [](const MelSpectrogram& m) {
    dsp::Waveform w;
    w.sample_rate = m.sample_rate;
    w.samples.assign(m.num_frames() * m.hop_length, 0.0f);
    return w;
  };
  const BenchResult r = measure_rtf(gen, vocoder, {.samples = 3, .warmup = 0});
  CHECK(r.rtf.mean == doctest::Approx(r.mrtf.mean).epsilon(0.02));
}

TEST_CASE("coarse timers raise a warning") {
  auto gen = [](std::size_t) { return stub_mel(0.5); };
  CHECK(measure_mrtf(gen, {.timer_resolution = 1.0}).warnings.size() == 1);
  CHECK(measure_timer_resolution() > 0);
  CHECK_THROWS_AS(measure_mrtf(gen, {.samples = 0}), ConfigError);
}

TEST_CASE("statistics of a single sample collapse") {
  const Stats s = summarize({3.0});
  CHECK(s.min == 3.0);
  CHECK(s.max == 3.0);
  CHECK(s.median == 3.0);
  CHECK(summarize({1, 4, 2, 10}).median == 3.0);
}

TEST_CASE("relative column is reference over value") {
  CHECK(relative_percent(0.27e6, 0.27e6) == "100.0%");
  CHECK(relative_percent(1.0, 4.0) == "25.0%");
  CHECK(relative_percent(1.0, 0.0) == "n/a");
}

TEST_CASE("reports survive a JSON round trip") {
  Report r;
  r.params = count_parameters(Model<float>(ModelConfig{}, 0));
  r.flops = count_flops(ModelConfig{}, 220, 517);
  BenchResult b;
  b.samples = 2;
  b.repeats = 1;
  b.with_vocoder = true;
  b.audio_seconds = {1.5, 2.25};
  b.mel_seconds = {0.01, 0.02};
  b.wave_seconds = {0.1, 0.3};
  b.mrtf = summarize({150, 112.5});
  b.rtf = summarize({13.6, 7.0});
  b.warnings = {"w"};
  r.bench = b;
  const std::string json = emit_json(r);
  CHECK(json.find("\"schema\": 1") != std::string::npos);
  const Report back = parse_json(json);
  CHECK(emit_json(back) == json);
  CHECK(emit_text(back) == emit_text(r));
  const std::string text = emit_text(r);
  CHECK(text.find("relative") != std::string::npos);
  CHECK(text.find("0.27M") != std::string::npos);
  CHECK(text.find("multiply-accumulate") != std::string::npos);
  CHECK_THROWS_AS(parse_json("{\"schema\": 2}"), DataError);
  CHECK_THROWS_AS(parse_json("not json"), DataError);
}

TEST_CASE("empty benchmark prints an explicit marker") {
  Report r;
  r.bench = BenchResult{};
  CHECK(emit_text(r).find("no samples") != std::string::npos);
  CHECK(emit_json(r).find("\"mrtf\": null") != std::string::npos);
  CHECK(emit_text(parse_json(emit_json(r))) == emit_text(r));
}
