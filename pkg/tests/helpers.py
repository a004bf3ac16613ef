"""Builders for small hand-made fixtures."""

import numpy as np


from posterior_mapping.acoustic_model import AcousticModel, LabelSpace, PosteriorStream, TiedStateInventory
from posterior_mapping.core_math import NetworkParams
from posterior_mapping.synthlang import Biphone, FrameCorpus, LanguageSpec


def build_spec(name, phonemes, biphones, dim=2, means=None, stddevs=None):
    """Hand-made language: biphone k has mean ``means[k]`` (default k * ones)."""
    biphones = tuple(Biphone(l, c) for l, c in biphones)
    n = len(biphones)
    if means is None:
        means = np.arange(n, dtype=np.float64)[:, None] * np.ones(dim)
    means = np.asarray(means, dtype=np.float64)
    return LanguageSpec(
        name=name,
        phonemes=tuple(phonemes),
        phoneme_means=np.zeros((len(phonemes), means.shape[1])),
        biphones=biphones,
        means=means,
        stddevs=np.ones_like(means) if stddevs is None else np.asarray(stddevs, dtype=np.float64),
        biphone_frequencies=np.full(n, 1.0 / n),
        mean_segment_frames=3,
    )


def corpus_from_labels(language, labels, means, frames_per_utterance=4):
    """Corpus whose features are exactly the unit means of its labels."""
    labels = np.asarray(labels, dtype=np.int64)
    means = np.asarray(means, dtype=np.float64)
    return FrameCorpus(language, means[labels], labels, np.arange(0, len(labels), frames_per_utterance))


def stream(probs, labels, space=LabelSpace.TIED_CLASS, fingerprint="f00d", language="A", model="A"):
    return PosteriorStream(np.asarray(probs, dtype=np.float64), np.asarray(labels), space, model, language, fingerprint)


def toy_model(name, clusters, n_units, dim=2, label_maps=None):
    tying = TiedStateInventory(name, clusters, n_units)
    net = NetworkParams.zeros((dim, tying.class_count))
    maps = label_maps or {name: np.arange(n_units)}
    return AcousticModel(name, tuple(f"u{k}" for k in range(n_units)), tying, net, maps)
