#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <sstream>

#include "efficientspeech/archive.hpp"
#include "efficientspeech/frontend.hpp"
#include "efficientspeech/profiler.hpp"
#include "efficientspeech/training.hpp"

namespace py = pybind11;
using namespace es;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<float> to_numpy(const std::vector<float>& v) {
  py::array_t<float> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

dsp::Waveform to_wave(const FloatArray& samples, std::size_t sample_rate) {
  if (samples.ndim() != 1) throw ShapeError("waveform must be one-dimensional");
  dsp::Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(samples.data(), samples.data() + samples.size());
  return w;
}

MelSpectrogram to_mel(const FloatArray& frames, const dsp::SpectrogramConfig& cfg) {
  if (frames.ndim() != 2) throw ShapeError("mel must be frames x n_mels");
  MelSpectrogram m;
  m.hop_length = cfg.hop_length;
  m.sample_rate = cfg.sample_rate;
  const auto rows = static_cast<std::size_t>(frames.shape(0));
  const auto cols = static_cast<std::size_t>(frames.shape(1));
  m.frames = Tensor<float>({rows, cols}, std::vector<float>(frames.data(), frames.data() + frames.size()));
  return m;
}

SymbolTable symbols_of(const ModelConfig& c) {
  return c.symbols.empty() ? SymbolTable::arpabet() : SymbolTable(c.symbols);
}

// Model weights together with the spectrogram settings they were trained for.
struct Synthesizer {
  Model<float> model;
  dsp::SpectrogramConfig spectrogram;

  py::dict synthesize(const std::vector<std::size_t>& ids, double duration_scale) const {
    const SynthesisResult<float> r = model.synthesize(PhonemeSequence(ids), duration_scale);
    py::dict d;
    d["mel"] = to_numpy(r.mel.frames);
    d["frames_per_phoneme"] = r.frames_per_phoneme;
    d["pitch"] = to_numpy(r.acoustic.y_pitch);
    d["energy"] = to_numpy(r.acoustic.y_energy);
    d["duration"] = to_numpy(r.acoustic.y_duration);
    return d;
  }
};

py::dict log_row(const TrainLogRow& r) {
  py::dict d;
  d["epoch"] = r.epoch;
  d["step"] = r.step;
  d["lr"] = r.lr;
  d["l_mel"] = r.loss.mel;
  d["l_p"] = r.loss.pitch;
  d["l_e"] = r.loss.energy;
  d["l_d"] = r.loss.duration;
  d["total"] = r.loss.total;
  d["grad_norm"] = r.grad_norm;
  return d;
}

}  // namespace

PYBIND11_MODULE(_efficientspeech, m) {
  m.doc() = "EfficientSpeech text-to-mel model";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  auto data_error = py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ArchiveError>(m, "ArchiveError", data_error.ptr());
  auto shape_error = py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<SequenceTooShortError>(m, "SequenceTooShortError", shape_error.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<TokenError>(m, "TokenError", base.ptr());
  py::register_exception<EmptyUtteranceError>(m, "EmptyUtteranceError", base.ptr());
  py::register_exception<AlignmentError>(m, "AlignmentError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  // frontend
  py::class_<SymbolTable>(m, "SymbolTable")
      .def(py::init<std::vector<std::string>>())
      .def_static("arpabet", &SymbolTable::arpabet)
      .def("__len__", &SymbolTable::size)
      .def("id", &SymbolTable::id)
      .def("symbol", &SymbolTable::symbol)
      .def_property_readonly("symbols", &SymbolTable::symbols);

  py::class_<Lexicon>(m, "Lexicon")
      .def_static("load", &Lexicon::load)
      .def_static("parse",
                  [](const std::string& text) {
                    std::istringstream in(text);
                    return Lexicon::parse(in);
                  })
      .def("__len__", &Lexicon::size)
      .def("lookup", [](const Lexicon& l, const std::string& w) -> std::optional<std::vector<std::string>> {
        if (const auto* p = l.find(w)) return *p;
        return std::nullopt;
      });

  m.def("text_to_phonemes", [](const std::string& text, const Lexicon& lex) {
    std::vector<std::string> oov;
    auto ph = text_to_phonemes(text, lex, &oov);
    return py::make_tuple(ph, oov);
  });
  m.def("phonemes_to_ids", [](const std::vector<std::string>& ph, const SymbolTable& t) {
    return phonemes_to_ids(ph, t).ids;
  });
  m.def("ids_to_phonemes", [](const std::vector<std::size_t>& ids, const SymbolTable& t) {
    return ids_to_phonemes(PhonemeSequence(ids), t);
  });

  // dsp
  py::class_<dsp::SpectrogramConfig>(m, "SpectrogramConfig")
      .def(py::init<>())
      .def_readwrite("sample_rate", &dsp::SpectrogramConfig::sample_rate)
      .def_readwrite("n_fft", &dsp::SpectrogramConfig::n_fft)
      .def_readwrite("win_length", &dsp::SpectrogramConfig::win_length)
      .def_readwrite("hop_length", &dsp::SpectrogramConfig::hop_length)
      .def_readwrite("n_mels", &dsp::SpectrogramConfig::n_mels)
      .def_readwrite("fmin", &dsp::SpectrogramConfig::fmin)
      .def_readwrite("fmax", &dsp::SpectrogramConfig::fmax)
      .def_readwrite("log_floor", &dsp::SpectrogramConfig::log_floor);

  m.def(
      "mel_spectrogram",
      [](const FloatArray& samples, const dsp::SpectrogramConfig& cfg) {
        return to_numpy(dsp::mel_spectrogram(to_wave(samples, cfg.sample_rate), cfg).frames);
      },
      py::arg("samples"), py::arg("config") = dsp::SpectrogramConfig{});
  m.def("mel_center_frequencies", &dsp::mel_center_frequencies, py::arg("config") = dsp::SpectrogramConfig{});
  m.def(
      "griffin_lim",
      [](const FloatArray& mel, const dsp::SpectrogramConfig& cfg, std::size_t iterations, std::uint64_t seed) {
        const auto r = dsp::griffin_lim(to_mel(mel, cfg), cfg, {.iterations = iterations, .seed = seed});
        return py::make_tuple(to_numpy(r.wave.samples), r.residuals);
      },
      py::arg("mel"), py::arg("config") = dsp::SpectrogramConfig{}, py::arg("iterations") = 32, py::arg("seed") = 0);
  m.def(
      "write_wav",
      [](const std::string& path, const FloatArray& samples, std::size_t sr) {
        dsp::write_wav(path, to_wave(samples, sr));
      },
      py::arg("path"), py::arg("samples"), py::arg("sample_rate") = 22050);
  m.def("read_wav", [](const std::string& path) {
    const auto w = dsp::read_wav(path);
    return py::make_tuple(to_numpy(w.samples), w.sample_rate);
  });

  // model
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("tiny", &ModelConfig::tiny)
      .def_static("with_width", &ModelConfig::with_width, py::arg("d"), py::arg("vocab_size"), py::arg("n_mels") = 80)
      .def_readwrite("d", &ModelConfig::d)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("n_mels", &ModelConfig::n_mels)
      .def_readwrite("n_bins", &ModelConfig::n_bins)
      .def_readwrite("max_duration", &ModelConfig::max_duration)
      .def_readwrite("symbols", &ModelConfig::symbols)
      .def("validate", &ModelConfig::validate);

  py::class_<Synthesizer>(m, "Model")
      .def(py::init([](const ModelConfig& c, std::uint64_t seed) {
             return Synthesizer{Model<float>(c, seed), {}};
           }),
           py::arg("config") = ModelConfig{}, py::arg("seed") = 0)
      .def_static("load",
                  [](const std::string& path) {
                    LoadedModel l = load_weights(path);
                    return Synthesizer{std::move(l.model), l.spectrogram};
                  })
      .def_static("from_bytes",
                  [](const py::bytes& b) {
                    LoadedModel l = decode_weights(std::string(b));
                    return Synthesizer{std::move(l.model), l.spectrogram};
                  })
      .def("save", [](const Synthesizer& s, const std::string& path) { save_weights(path, s.model, s.spectrogram); })
      .def("to_bytes", [](const Synthesizer& s) { return py::bytes(encode_weights(s.model, s.spectrogram)); })
      .def_property_readonly("config", [](const Synthesizer& s) { return s.model.config(); })
      .def_property_readonly("spectrogram", [](const Synthesizer& s) { return s.spectrogram; })
      .def_property_readonly("symbols", [](const Synthesizer& s) { return symbols_of(s.model.config()); })
      .def("parameter_count", [](const Synthesizer& s) { return s.model.parameter_count(); })
      .def("parameter_names",
           [](const Synthesizer& s) {
             std::vector<std::string> names;
             for (const auto& p : s.model.parameters()) names.push_back(p.name);
             return names;
           })
      .def("parameter", [](const Synthesizer& s, const std::string& name) { return to_numpy(s.model.parameter(name)->value); })
      .def("synthesize", &Synthesizer::synthesize, py::arg("ids"), py::arg("duration_scale") = 1.0);

  m.def("duration_to_frames", [](const std::vector<double>& d, double scale, std::size_t max) {
    return duration_to_frames(d, scale, max);
  });

  // training
  m.def(
      "train_toy",
      [](std::size_t samples, std::uint64_t seed, std::size_t epochs, std::size_t warmup_epochs, double lr) {
        const dsp::SpectrogramConfig sc;
        std::vector<TrainSample> data;
        for (auto& u : generate_toy_dataset(samples, seed, sc)) data.push_back(std::move(u.sample));
        ModelConfig mc;
        fit_acoustic_statistics(mc, data);
        TrainConfig tc;
        tc.total_epochs = epochs;
        tc.warmup_epochs = warmup_epochs;
        tc.seed = seed;
        tc.lr = lr;
        Synthesizer s{Model<float>(mc, seed), sc};
        AdamState<float> state;
        std::vector<TrainLogRow> log;
        {
          py::gil_scoped_release release;
          log = train(s.model, data, tc, state);
        }
        py::list rows;
        for (const auto& r : log) rows.append(log_row(r));
        return py::make_tuple(std::move(s), rows);
      },
      py::arg("samples") = 8, py::arg("seed") = 7, py::arg("epochs") = 500, py::arg("warmup_epochs") = 50,
      py::arg("lr") = 1e-3);

  m.def(
      "toy_dataset",
      [](std::size_t samples, std::uint64_t seed) {
        py::list out;
        for (const auto& u : generate_toy_dataset(samples, seed, {})) {
          py::dict d;
          d["ids"] = u.sample.ids.ids;
          d["durations"] = u.sample.durations;
          d["pitch"] = u.sample.pitch;
          d["energy"] = u.sample.energy;
          d["mel"] = to_numpy(u.sample.mel);
          d["wave"] = to_numpy(u.wave.samples);
          out.append(d);
        }
        return out;
      },
      py::arg("samples"), py::arg("seed") = 0);

  // profiling
  m.def("count_parameters", [](const Synthesizer& s) {
    const auto r = prof::count_parameters(s.model);
    py::dict groups;
    for (const auto& g : r.groups) groups[py::str(g.name)] = g.count;
    return py::make_tuple(r.total, groups);
  });
  m.def(
      "count_flops",
      [](const ModelConfig& c, std::size_t phonemes, std::size_t frames) {
        const auto r = prof::count_flops(c, phonemes, frames);
        py::dict modules;
        for (const auto& l : r.layers) {
          const py::str key(l.module);
          const std::uint64_t prev = modules.contains(key) ? modules[key].cast<std::uint64_t>() : 0;
          modules[key] = prev + l.macs;
        }
        return py::make_tuple(r.total, modules);
      },
      py::arg("config"), py::arg("phonemes"), py::arg("frames"));
  m.def("frames_for_seconds", &prof::frames_for_seconds, py::arg("seconds"),
        py::arg("config") = dsp::SpectrogramConfig{});
  m.def(
      "measure_mrtf",
      [](const Synthesizer& s, const std::vector<std::vector<std::size_t>>& inputs, std::size_t repeats) {
        if (inputs.empty()) throw ConfigError("need at least one input");
        auto gen = [&](std::size_t i) {
          MelSpectrogram mel = s.model.synthesize(PhonemeSequence(inputs[i])).mel;
          mel.hop_length = s.spectrogram.hop_length;
          mel.sample_rate = s.spectrogram.sample_rate;
          return mel;
        };
        prof::Report report;
        {
          py::gil_scoped_release release;
          report.bench = prof::measure_mrtf(gen, {.samples = inputs.size(), .repeats = repeats});
        }
        return prof::emit_json(report);
      },
      py::arg("model"), py::arg("inputs"), py::arg("repeats") = 1);
}
