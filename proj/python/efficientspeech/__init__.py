"""Python bindings for the efficientspeech C++ library."""

import json as _json

from ._efficientspeech import (
    AlignmentError,
    ArchiveError,
    ConfigError,
    DataError,
    EmptyUtteranceError,
    Error,
    Lexicon,
    Model,
    ModelConfig,
    NumericError,
    SequenceTooShortError,
    ShapeError,
    SpectrogramConfig,
    SymbolTable,
    TokenError,
    count_flops,
    count_parameters,
    duration_to_frames,
    frames_for_seconds,
    griffin_lim,
    ids_to_phonemes,
    mel_center_frequencies,
    mel_spectrogram,
    phonemes_to_ids,
    read_wav,
    text_to_phonemes,
    toy_dataset,
    train_toy,
    write_wav,
)
from ._efficientspeech import measure_mrtf as _measure_mrtf


def measure_mrtf(model, inputs, repeats=1):
    """Benchmark mel generation; returns the parsed JSON report."""
    return _json.loads(_measure_mrtf(model, inputs, repeats))


def synthesize_text(model, text, lexicon, duration_scale=1.0, gl_iterations=32, seed=0):
    """Text to (waveform, sample_rate, phonemes)."""
    phonemes, _ = text_to_phonemes(text, lexicon)
    ids = phonemes_to_ids(phonemes, model.symbols)
    mel = model.synthesize(ids, duration_scale)["mel"]
    wave, _ = griffin_lim(mel, model.spectrogram, gl_iterations, seed)
    return wave, model.spectrogram.sample_rate, phonemes


__version__ = "0.1.0"
