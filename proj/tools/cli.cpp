#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "efficientspeech/archive.hpp"
#include "efficientspeech/frontend.hpp"
#include "efficientspeech/profiler.hpp"
#include "efficientspeech/rng.hpp"
#include "efficientspeech/training.hpp"
#include "json.hpp"

namespace es::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_lexicon() {
  if (const char* env = std::getenv("ES_LEXICON")) return env;
  return ES_DEFAULT_LEXICON;
}

SymbolTable symbol_table(const ModelConfig& config) {
  return config.symbols.empty() ? SymbolTable::arpabet() : SymbolTable(config.symbols);
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + v[i];
  return s;
}

// ---- synth ----------------------------------------------------------------------------------

struct SynthArgs {
  std::string text, phonemes, ids, weights, lexicon = default_lexicon(), out, emit_mel;
  double duration_scale = 1.0;
  std::size_t gl_iters = 32;
  std::uint64_t seed = 0;
  bool json = false;
};

int synth(const SynthArgs& a, std::ostream& out, std::ostream& err) {
  const int given = !a.text.empty() + !a.phonemes.empty() + !a.ids.empty();
  if (given != 1) throw UsageError("synth needs exactly one of --text, --phonemes or --ids");
  if (!(a.duration_scale > 0)) throw UsageError("--duration-scale must be positive");
  if (a.gl_iters == 0) throw UsageError("--gl-iters must be at least 1");
  LoadedModel loaded = load_weights(a.weights);
  const SymbolTable table = symbol_table(loaded.model.config());

  std::vector<std::string> phonemes;
  PhonemeSequence ids;
  if (!a.text.empty()) {
    const Lexicon lex = Lexicon::load(a.lexicon);
    std::vector<std::string> oov;
    phonemes = text_to_phonemes(a.text, lex, &oov);
    for (const auto& w : oov) err << "warning: '" << w << "' is not in the lexicon\n";
    if (phonemes.empty()) throw EmptyUtteranceError("text contains no words");
    ids = phonemes_to_ids(phonemes, table);
  } else if (!a.phonemes.empty()) {
    phonemes = split_phonemes(a.phonemes);
    if (phonemes.empty()) throw EmptyUtteranceError("no phonemes given");
    for (const auto& p : phonemes) {
      if (!table.contains(p)) err << "warning: unknown phoneme '" << p << "' mapped to " << kUnkSymbol << "\n";
    }
    ids = phonemes_to_ids(phonemes, table);
  } else {
    std::vector<std::size_t> v;
    std::istringstream in(a.ids);
    std::string tok;
    while (in >> tok) {
      std::size_t pos = 0;
      unsigned long long id = 0;
      try {
        id = std::stoull(tok, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != tok.size()) throw UsageError("--ids expects space-separated integers, got '" + tok + "'");
      v.push_back(static_cast<std::size_t>(id));
    }
    if (v.empty()) throw EmptyUtteranceError("no ids given");
    ids = PhonemeSequence(v);
    for (std::size_t id : ids.ids) phonemes.push_back(id < table.size() ? table.symbol(id) : "?");
  }
  err << "phonemes: " << join(phonemes) << "\n";

  auto result = loaded.model.synthesize(ids, a.duration_scale);
  if (!result.mel.frames.all_finite()) throw NumericError("synthesized mel contains non-finite values");
  if (!a.emit_mel.empty()) write_file(a.emit_mel, encode_mel(result.mel, loaded.spectrogram));
  auto gl = dsp::griffin_lim(result.mel, loaded.spectrogram, {.iterations = a.gl_iters, .seed = a.seed});
  dsp::write_wav(a.out, gl.wave);

  std::size_t frames = 0;
  for (std::size_t f : result.frames_per_phoneme) frames += f;
  if (a.json) {
    json j = {{"phonemes", join(phonemes)},
              {"ids", ids.ids},
              {"frames_per_phoneme", result.frames_per_phoneme},
              {"frames", frames},
              {"samples", gl.wave.samples.size()},
              {"seconds", gl.wave.seconds()},
              {"wav", a.out}};
    if (!a.emit_mel.empty()) j["mel"] = a.emit_mel;
    out << j.dump(2) << "\n";
  } else {
    out << "wrote " << a.out << ": " << frames << " frames, " << gl.wave.samples.size() << " samples ("
        << gl.wave.seconds() << " s)\n";
  }
  return kOk;
}

// ---- train ----------------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data = "toy", out, log, resume;
  std::size_t samples = 8;
  std::uint64_t seed = 7;
  std::size_t epochs = 500;
  std::size_t warmup_epochs = 50;
  std::size_t checkpoint_every = 0;
  bool json = false;
};

// Manifest lines: `<wav path>\t<phonemes>\t<durations>`, paths relative to the directory.
std::vector<TrainSample> load_directory(const std::string& dir, const SymbolTable& table,
                                        const dsp::SpectrogramConfig& cfg) {
  const fs::path manifest = fs::path(dir) / "manifest.tsv";
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open " + manifest.string());
  std::vector<TrainSample> data;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty() || line[0] == '#') continue;
    const std::string where = manifest.string() + ":" + std::to_string(lineno) + ": ";
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
    if (cols.size() != 3) throw DataError(where + "expected 3 tab-separated columns");
    const auto phonemes = split_phonemes(cols[1]);
    std::vector<std::size_t> durations;
    std::istringstream ds(cols[2]);
    for (long long d; ds >> d;) {
      if (d < 0) throw DataError(where + "negative duration");
      durations.push_back(static_cast<std::size_t>(d));
    }
    if (!ds.eof()) throw DataError(where + "durations must be integers");
    if (phonemes.empty() || durations.size() != phonemes.size()) {
      throw DataError(where + "needs one duration per phoneme");
    }
    const dsp::Waveform wave = dsp::read_wav((fs::path(dir) / cols[0]).string());
    if (wave.sample_rate != cfg.sample_rate) throw DataError(where + "sample rate differs from the model's");
    try {
      data.push_back(extract_targets(wave, phonemes_to_ids(phonemes, table), durations, cfg));
    } catch (const AlignmentError& e) {
      throw DataError(where + e.what());
    }
  }
  if (data.empty()) throw DataError(manifest.string() + " lists no utterances");
  return data;
}

int train_cmd(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig tc;
  if (!a.config.empty()) {
    tc = TrainConfig::read(KeyValues::load(a.config));
  } else {
    tc.total_epochs = a.epochs;
    tc.warmup_epochs = a.warmup_epochs;
    tc.seed = a.seed;
    tc.checkpoint_every = a.checkpoint_every;
  }
  const dsp::SpectrogramConfig sc;
  ModelConfig mc;
  std::vector<TrainSample> data;
  if (a.data == "toy") {
    for (auto& u : generate_toy_dataset(a.samples, tc.seed, sc)) data.push_back(std::move(u.sample));
  } else {
    data = load_directory(a.data, symbol_table(mc), sc);
  }

  std::optional<Model<float>> model;
  AdamState<float> state;
  if (!a.resume.empty()) {
    LoadedModel loaded = load_weights(a.resume);
    model.emplace(std::move(loaded.model));
    const std::string opt = optimizer_path(a.resume);
    if (!fs::exists(opt)) throw DataError("cannot resume: optimizer state " + opt + " is missing");
    state = load_optimizer(opt, *model);
    err << "resuming from step " << state.step << "\n";
  } else {
    fit_acoustic_statistics(mc, data);
    model.emplace(mc, tc.seed);
  }

  const std::string log_path = a.log.empty() ? a.out + ".csv" : a.log;
  std::ofstream csv(log_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!csv) throw DataError("cannot write " + log_path);
  TrainHooks hooks;
  hooks.csv = &csv;
  hooks.checkpoint = [&](std::size_t epoch, const Model<float>& m, const AdamState<float>& s) {
    const std::string ckpt = a.out + ".epoch" + std::to_string(epoch);
    save_weights(ckpt, m, sc);
    save_optimizer(optimizer_path(ckpt), m, s);
    err << "wrote checkpoint " << ckpt << "\n";
  };
  const auto log = train(*model, data, tc, state, hooks);
  save_weights(a.out, *model, sc);
  save_optimizer(optimizer_path(a.out), *model, state);

  if (a.json) {
    json rows = json::array();
    json j = {{"weights", a.out}, {"log", log_path}, {"steps", state.step}, {"samples", data.size()}};
    if (!log.empty()) {
      const auto& f = log.front().loss;
      const auto& l = log.back().loss;
      j["first"] = {{"l_mel", f.mel}, {"l_p", f.pitch}, {"l_e", f.energy}, {"l_d", f.duration}, {"total", f.total}};
      j["last"] = {{"l_mel", l.mel}, {"l_p", l.pitch}, {"l_e", l.energy}, {"l_d", l.duration}, {"total", l.total}};
    }
    out << j.dump(2) << "\n";
  } else if (!log.empty()) {
    const auto& f = log.front().loss;
    const auto& l = log.back().loss;
    out << "trained " << log.size() << " steps on " << data.size() << " utterances; total loss " << f.total
        << " -> " << l.total << " (mel " << f.mel << " -> " << l.mel << ", duration " << f.duration << " -> "
        << l.duration << ")\nwrote " << a.out << " and " << log_path << "\n";
  } else {
    out << "nothing to do: already at step " << state.step << "\n";
  }
  return kOk;
}

// ---- profile / bench ------------------------------------------------------------------------

struct ProfileArgs {
  std::string weights, config;
  std::size_t phonemes = 220;
  double seconds = prof::kReferenceSeconds;
  bool json = false;
};

int profile(const ProfileArgs& a, std::ostream& out) {
  if (a.weights.empty() == a.config.empty()) throw UsageError("profile needs exactly one of --weights or --config");
  if (!(a.seconds > 0) || a.phonemes == 0) throw UsageError("--n and --seconds must be positive");
  ModelConfig mc;
  dsp::SpectrogramConfig sc;
  if (!a.weights.empty()) {
    LoadedModel loaded = load_weights(a.weights);
    mc = loaded.model.config();
    sc = loaded.spectrogram;
  } else if (a.config != "default") {
    const KeyValues kv = KeyValues::load(a.config);
    mc = ModelConfig::read(kv);
    if (kv.has("dsp.sample_rate")) sc = dsp::SpectrogramConfig::read(kv);
  }
  mc.validate();
  prof::Report report;
  report.params = prof::count_parameters(Model<float>(mc, 0));
  report.flops = prof::count_flops(mc, a.phonemes, prof::frames_for_seconds(a.seconds, sc));
  out << (a.json ? prof::emit_json(report) + "\n" : prof::emit_text(report));
  return kOk;
}

struct BenchArgs {
  std::string weights;
  std::size_t samples = 8, repeats = 1, warmup = 1, gl_iters = 32, min_phonemes = 20, max_phonemes = 60;
  std::uint64_t seed = 0;
  bool with_vocoder = false, json = false;
};

int bench(const BenchArgs& a, std::ostream& out) {
  if (a.samples == 0 || a.repeats == 0) throw UsageError("--samples and --repeats must be at least 1");
  if (a.min_phonemes == 0 || a.min_phonemes > a.max_phonemes) throw UsageError("invalid phoneme length range");
  LoadedModel loaded = load_weights(a.weights);
  const ModelConfig& mc = loaded.model.config();
  Rng rng(a.seed);
  std::vector<PhonemeSequence> inputs;
  for (std::size_t i = 0; i < a.samples; ++i) {
    const auto n = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(a.min_phonemes), static_cast<std::int64_t>(a.max_phonemes)));
    std::vector<std::size_t> ids(n);
    for (auto& id : ids) id = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(mc.vocab_size) - 1));
    inputs.emplace_back(ids);
  }
  auto generate = [&](std::size_t i) {
    MelSpectrogram mel = loaded.model.synthesize(inputs[i]).mel;
    mel.hop_length = loaded.spectrogram.hop_length;
    mel.sample_rate = loaded.spectrogram.sample_rate;
    return mel;
  };
  const prof::BenchOptions opt{.samples = a.samples, .repeats = a.repeats, .warmup = a.warmup};
  prof::Report report;
  if (a.with_vocoder) {
    auto vocoder = [&](const MelSpectrogram& m) {
      return dsp::griffin_lim(m, loaded.spectrogram, {.iterations = a.gl_iters}).wave;
    };
    report.bench = prof::measure_rtf(generate, vocoder, opt);
  } else {
    report.bench = prof::measure_mrtf(generate, opt);
  }
  out << (a.json ? prof::emit_json(report) + "\n" : prof::emit_text(report));
  return kOk;
}

int report_error(std::ostream& err, const std::string& what, int code) {
  err << "error: " << what << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lightweight text-to-speech: synthesis, training, profiling and benchmarking", "efficientspeech"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Synthesize a WAV file");
  synth_cmd->add_option("--text", sa.text, "English text (looked up in the lexicon)");
  synth_cmd->add_option("--phonemes", sa.phonemes, "Space-separated ARPAbet phonemes");
  synth_cmd->add_option("--ids", sa.ids, "Space-separated token ids");
  synth_cmd->add_option("--weights", sa.weights, "ESW1 weight archive")->required();
  synth_cmd->add_option("--lexicon", sa.lexicon, "CMU-format pronunciation dictionary");
  synth_cmd->add_option("--out", sa.out, "Output WAV path")->required();
  synth_cmd->add_option("--duration-scale", sa.duration_scale, "Speaking-rate multiplier on durations");
  synth_cmd->add_option("--gl-iters", sa.gl_iters, "Griffin-Lim iterations");
  synth_cmd->add_option("--emit-mel", sa.emit_mel, "Also write the mel spectrogram (ESM1)");
  synth_cmd->add_option("--seed", sa.seed, "Griffin-Lim phase seed");
  synth_cmd->add_flag("--json", sa.json, "Machine-readable output");

  TrainArgs ta;
  auto* train_sub = app.add_subcommand("train", "Train on the toy set or a manifest directory");
  train_sub->add_option("--config", ta.config, "Training config file (key=value; every key required)");
  train_sub->add_option("--data", ta.data, "'toy' or a directory with manifest.tsv");
  train_sub->add_option("--samples", ta.samples, "Toy utterances");
  train_sub->add_option("--seed", ta.seed, "Data, initialization and shuffle seed");
  train_sub->add_option("--epochs", ta.epochs, "Epochs");
  train_sub->add_option("--warmup-epochs", ta.warmup_epochs, "Linear warmup length");
  train_sub->add_option("--checkpoint-every", ta.checkpoint_every, "Save every K epochs (0 = off)");
  train_sub->add_option("--out", ta.out, "Output weight archive")->required();
  train_sub->add_option("--log", ta.log, "CSV log path (default <out>.csv)");
  train_sub->add_option("--resume", ta.resume, "Continue from this archive and its optimizer state");
  train_sub->add_flag("--json", ta.json, "Machine-readable output");

  ProfileArgs pa;
  auto* profile_cmd = app.add_subcommand("profile", "Parameter and FLOP counts");
  profile_cmd->add_option("--weights", pa.weights, "ESW1 weight archive");
  profile_cmd->add_option("--config", pa.config, "Model config file, or 'default'");
  profile_cmd->add_option("--n", pa.phonemes, "Phonemes");
  profile_cmd->add_option("--seconds", pa.seconds, "Seconds of mel");
  profile_cmd->add_flag("--json", pa.json, "Machine-readable output");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Measure mRTF (and RTF with --with-vocoder)");
  bench_cmd->add_option("--weights", ba.weights, "ESW1 weight archive")->required();
  bench_cmd->add_option("--samples", ba.samples, "Synthetic inputs");
  bench_cmd->add_option("--repeats", ba.repeats, "Timed runs per input");
  bench_cmd->add_option("--warmup", ba.warmup, "Untimed warmup runs");
  bench_cmd->add_option("--min-phonemes", ba.min_phonemes, "Shortest input");
  bench_cmd->add_option("--max-phonemes", ba.max_phonemes, "Longest input");
  bench_cmd->add_option("--gl-iters", ba.gl_iters, "Griffin-Lim iterations");
  bench_cmd->add_option("--seed", ba.seed, "Input selection seed");
  bench_cmd->add_flag("--with-vocoder", ba.with_vocoder, "Include Griffin-Lim in the timing");
  bench_cmd->add_flag("--json", ba.json, "Machine-readable output");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth_cmd) return synth(sa, out, err);
    if (*train_sub) return train_cmd(ta, out, err);
    if (*profile_cmd) return profile(pa, out);
    if (*bench_cmd) return bench(ba, out);
  } catch (const UsageError& e) {
    return report_error(err, e.what(), kUsage);
  } catch (const NumericError& e) {
    return report_error(err, e.what(), kNumericError);
  } catch (const ArchiveError& e) {
    return report_error(err, e.what(), kDataError);
  } catch (const Error& e) {
    return report_error(err, e.what(), kDataError);
  } catch (const std::exception& e) {
    return report_error(err, e.what(), 1);
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace es::cli
