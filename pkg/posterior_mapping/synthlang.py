"""Synthetic languages and labeled frame corpora.

A family is drawn from one universal phoneme pool. Each language takes a
subset of the pool (so inventories overlap by construction), realizes its
phonemes as the pool's base means plus language drift, and attests a subset
of left biphones. Every biphone emits frames from a diagonal Gaussian.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import xxhash

from . import formats
from .config import FamilyConfig, derive_seed
from .core_math import make_rng
from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    FormatError,
    InvalidDistributionError,
    UnsatisfiableFamilyError,
)

logger = logging.getLogger(__name__)

CENTER_WEIGHT = 0.7
LEFT_WEIGHT = 0.3
STDDEV_SPREAD = 0.2  # per-dimension stddev factor drawn from [1 - s, 1 + s]


# ============================================================================
# Data Structures
# ============================================================================

@dataclass(frozen=True, order=True)
class Biphone:
    """A left biphone: ``center`` spoken after ``left``."""
    left: str
    center: str

    @property
    def key(self) -> str:
        return f"{self.left}+{self.center}"


@dataclass
class LanguageSpec:
    """A synthetic language: inventories plus per-biphone emission Gaussians."""

    name: str
    phonemes: tuple[str, ...]
    phoneme_means: np.ndarray  # (phonemes, D), drifted base means
    biphones: tuple[Biphone, ...]
    means: np.ndarray  # (biphones, D)
    stddevs: np.ndarray  # (biphones, D)
    biphone_frequencies: np.ndarray
    mean_segment_frames: int

    def __post_init__(self):
        self.phonemes = tuple(self.phonemes)
        self.biphones = tuple(self.biphones)
        if not self.name or any(not p for p in self.phonemes):
            raise ConfigError("language and phoneme names must be nonempty")
        known = set(self.phonemes)
        stray = [b.key for b in self.biphones if b.left not in known or b.center not in known]
        if stray:
            raise ConfigError(f"{self.name}: biphones outside the inventory: {stray[:5]}")
        n = len(self.biphones)
        if self.means.shape != self.stddevs.shape or self.means.shape[0] != n:
            raise DimensionMismatchError(f"{self.name}: emission arrays do not match {n} biphones")
        if self.phoneme_means.shape != (len(self.phonemes), self.means.shape[1]):
            raise DimensionMismatchError(f"{self.name}: phoneme means do not match the inventory")
        if not np.all(self.stddevs > 0):
            raise ConfigError(f"{self.name}: emission stddevs must be positive")
        freqs = self.biphone_frequencies
        if freqs.shape != (n,) or (freqs < 0).any() or abs(freqs.sum() - 1.0) > 1e-9:
            raise InvalidDistributionError(f"{self.name}: biphone frequencies must be a distribution")

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    @cached_property
    def biphone_index(self) -> dict[Biphone, int]:
        return {b: i for i, b in enumerate(self.biphones)}

    def phoneme_mean(self, symbol: str) -> np.ndarray:
        return self.phoneme_means[self.phonemes.index(symbol)]

    def to_manifest(self) -> dict:
        return {
            "kind": "language",
            "name": self.name,
            "phonemes": list(self.phonemes),
            "phoneme_means": self.phoneme_means.tolist(),
            "biphones": [[b.left, b.center] for b in self.biphones],
            "means": self.means.tolist(),
            "stddevs": self.stddevs.tolist(),
            "biphone_frequencies": self.biphone_frequencies.tolist(),
            "mean_segment_frames": int(self.mean_segment_frames),
        }

    @classmethod
    def from_manifest(cls, data: dict) -> "LanguageSpec":
        return cls(
            name=data["name"],
            phonemes=tuple(data["phonemes"]),
            phoneme_means=np.asarray(data["phoneme_means"], dtype=np.float64),
            biphones=tuple(Biphone(l, c) for l, c in data["biphones"]),
            means=np.asarray(data["means"], dtype=np.float64),
            stddevs=np.asarray(data["stddevs"], dtype=np.float64),
            biphone_frequencies=np.asarray(data["biphone_frequencies"], dtype=np.float64),
            mean_segment_frames=int(data["mean_segment_frames"]),
        )

    def save(self, path: Path) -> Path:
        return formats.write_manifest(path, self.to_manifest())

    @classmethod
    def load(cls, path: Path) -> "LanguageSpec":
        return cls.from_manifest(formats.read_manifest(path))


@dataclass
class FrameCorpus:
    """Frames of one language with exact biphone labels.

    ``labels`` index into the language's biphone list and
    ``utterance_boundaries`` holds the start frame of every utterance.
    """

    language: str
    features: np.ndarray
    labels: np.ndarray
    utterance_boundaries: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.utterance_boundaries = np.asarray(self.utterance_boundaries, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DimensionMismatchError("features and labels must have one row per frame")
        b = self.utterance_boundaries
        if len(self.labels) and (len(b) == 0 or b[0] != 0 or np.any(np.diff(b) <= 0) or b[-1] >= len(self.labels)):
            raise DimensionMismatchError("utterance boundaries must be sorted start frames beginning at 0")

    @property
    def n_frames(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_utterances(self) -> int:
        return len(self.utterance_boundaries)

    def utterance_spans(self) -> list[tuple[int, int]]:
        ends = list(self.utterance_boundaries[1:]) + [self.n_frames]
        return [(int(s), int(e)) for s, e in zip(self.utterance_boundaries, ends)]

    @cached_property
    def fingerprint(self) -> str:
        digest = xxhash.xxh64(self.language.encode("utf-8"))
        digest.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(self.labels, dtype="<u4").tobytes())
        digest.update(np.ascontiguousarray(self.utterance_boundaries, dtype="<u4").tobytes())
        return digest.hexdigest()

    def check_labels(self, lang: LanguageSpec) -> None:
        if self.language != lang.name:
            raise ConfigError(f"corpus of {self.language} checked against {lang.name}")
        if self.n_frames and (self.labels.min() < 0 or self.labels.max() >= len(lang.biphones)):
            raise DimensionMismatchError(f"{self.language}: labels outside the biphone inventory")

    def to_bytes(self) -> bytes:
        return formats.corpus_to_bytes(self.features, self.labels, self.utterance_boundaries)

    def save(self, stem: Path) -> list[Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        blob = stem.with_suffix(".pmfc")
        blob.write_bytes(self.to_bytes())
        manifest = formats.write_manifest(
            stem.with_suffix(".yaml"),
            {
                "kind": "corpus",
                "language": self.language,
                "frames": self.n_frames,
                "dim": self.feature_dim,
                "utterances": self.n_utterances,
                "fingerprint": self.fingerprint,
            },
        )
        return [manifest, blob]

    @classmethod
    def load(cls, stem: Path) -> "FrameCorpus":
        stem = Path(stem)
        manifest = formats.read_manifest(stem.with_suffix(".yaml"))
        blob = stem.with_suffix(".pmfc")
        features, labels, boundaries = formats.corpus_from_bytes(formats.read_blob(blob), str(blob))
        corpus = cls(manifest["language"], features, labels, boundaries)
        if corpus.fingerprint != manifest["fingerprint"]:
            raise FormatError(f"{blob}: fingerprint does not match its manifest")
        return corpus


def concat_corpora(corpora: Sequence[FrameCorpus], language: str) -> FrameCorpus:
    """Concatenate corpora (labels must already share one label space)."""
    offsets = np.cumsum([0] + [c.n_frames for c in corpora[:-1]])
    return FrameCorpus(
        language,
        np.concatenate([c.features for c in corpora]),
        np.concatenate([c.labels for c in corpora]),
        np.concatenate([c.utterance_boundaries + off for c, off in zip(corpora, offsets)]),
    )


# ============================================================================
# Family generation
# ============================================================================

def _allocate_inventories(cfg: FamilyConfig) -> list[list[int]]:
    """Pick pool phoneme ids per language so pairwise overlaps match the request.

    Language j greedily draws from the membership regions of the earlier
    languages' inventories, minimizing the squared miss on every requested
    intersection size, then fills up with fresh pool phonemes.
    """
    n = len(cfg.names)
    for key, value in cfg.overlaps.items():
        if value > 1.0:
            raise UnsatisfiableFamilyError(f"overlap {key}={value} exceeds 1")

    inventories: list[list[int]] = []
    next_id = 0
    for j in range(n):
        size = cfg.phoneme_count(j)
        targets = [round(cfg.overlap(i, j) * size) for i in range(j)]
        for i, target in enumerate(targets):
            if target > len(inventories[i]):
                raise UnsatisfiableFamilyError(
                    f"{cfg.names[j]} cannot share {target} phonemes with {cfg.names[i]} "
                    f"({len(inventories[i])} phonemes)"
                )

        regions: dict[tuple[int, ...], list[int]] = {}
        for pid in sorted({p for inv in inventories for p in inv}):
            signature = tuple(i for i, inv in enumerate(inventories) if pid in inv)
            regions.setdefault(signature, []).append(pid)

        chosen: list[int] = []
        counts = [0] * j
        error = sum(t * t for t in targets)
        while len(chosen) < size:
            best = None
            for signature in sorted(regions):
                if not regions[signature]:
                    continue
                trial = sum(
                    (counts[i] + (i in signature) - targets[i]) ** 2 for i in range(j)
                )
                if trial < error:
                    best, error = signature, trial
            if best is None:
                break
            chosen.append(regions[best].pop(0))
            for i in best:
                counts[i] += 1

        while len(chosen) < size:
            chosen.append(next_id)
            next_id += 1

        for i in range(j):
            requested = cfg.overlap(i, j) * size
            achieved = len(set(chosen) & set(inventories[i]))
            if abs(achieved - requested) > 1.0:
                raise UnsatisfiableFamilyError(
                    f"{cfg.names[i]}/{cfg.names[j]}: achieved {achieved} shared phonemes, "
                    f"requested {requested:.1f}"
                )
        inventories.append(sorted(chosen))
    return inventories


def _symbol(pid: int) -> str:
    return f"p{pid:03d}"


def _select_biphones(scores: np.ndarray, ids: list[int], count: int) -> list[tuple[int, int]]:
    """Lowest-scoring (left, center) pairs; every phoneme is a center at least once."""
    pairs = [(l, c) for c in ids for l in ids]
    order = sorted(pairs, key=lambda lc: (scores[lc], lc))
    picked: dict[tuple[int, int], None] = {}
    for c in ids:
        best = min((lc for lc in pairs if lc[1] == c), key=lambda lc: (scores[lc], lc))
        picked[best] = None
    for lc in order:
        if len(picked) >= max(count, len(ids)):
            break
        picked.setdefault(lc, None)
    return sorted(picked)


def make_language_family(cfg: FamilyConfig) -> list[LanguageSpec]:
    """Generate the languages of a family.

    Shared phonemes start from the same pool base mean; each language adds
    Gaussian drift of its own scale, so drift 0 keeps them bitwise equal.
    Biphone attestation uses a pool-level score plus language noise scaled
    by the phonotactic drift.
    """
    inventories = _allocate_inventories(cfg)
    pool = max(max(inv) for inv in inventories) + 1
    dim = cfg.feature_dim

    pool_rng = make_rng(derive_seed(cfg.seed, "pool"), "sample")
    base_means = pool_rng.standard_normal((pool, dim)) * cfg.phoneme_spread
    attestation = pool_rng.random((pool, pool))
    jitter = pool_rng.standard_normal((pool, pool, dim)) * cfg.biphone_jitter
    spread = 1.0 + STDDEV_SPREAD * (2.0 * pool_rng.random((pool, pool, dim)) - 1.0)

    languages = []
    for index, (name, ids) in enumerate(zip(cfg.names, inventories)):
        rng = make_rng(derive_seed(cfg.seed, "language", name), "sample")
        drift = cfg.drift_of(index)
        noise = rng.standard_normal((len(ids), dim))
        means = base_means[ids] + drift * noise if drift > 0 else base_means[ids].copy()
        realized = {pid: means[k] for k, pid in enumerate(ids)}

        scores = attestation.copy()
        phonotactic = cfg.phonotactic_drift_of(index)
        if phonotactic > 0:
            scores = scores + phonotactic * rng.standard_normal((pool, pool))
        pairs = _select_biphones(scores, ids, cfg.biphones_per_language)

        bi_means = np.stack(
            [CENTER_WEIGHT * realized[c] + LEFT_WEIGHT * realized[l] + jitter[l, c] for l, c in pairs]
        )
        bi_std = np.stack([cfg.noise_std * spread[l, c] for l, c in pairs])
        freqs = rng.dirichlet(np.full(len(pairs), cfg.dirichlet_alpha))
        freqs = freqs / freqs.sum()

        languages.append(
            LanguageSpec(
                name=name,
                phonemes=tuple(_symbol(pid) for pid in ids),
                phoneme_means=means,
                biphones=tuple(Biphone(_symbol(l), _symbol(c)) for l, c in pairs),
                means=bi_means,
                stddevs=bi_std,
                biphone_frequencies=freqs,
                mean_segment_frames=cfg.mean_segment_frames,
            )
        )
        logger.info(
            "language %s: %d phonemes, %d biphones, drift %.3g", name, len(ids), len(pairs), drift
        )
    return languages


# ============================================================================
# Corpora
# ============================================================================

def sample_corpus(
    lang: LanguageSpec, n_frames: int, seed: int, segments_per_utterance: int = 12
) -> FrameCorpus:
    """Sample ``n_frames`` labeled frames.

    Segments pick a biphone by frequency and last a geometric number of
    frames with mean ``mean_segment_frames``; every
    ``segments_per_utterance`` segments start a new utterance.
    """
    if n_frames < 1:
        raise EmptyInputError("a corpus needs at least one frame")
    rng = make_rng(seed, "sample")
    # Every segment has at least one frame, so n_frames segments always suffice.
    segment_labels = rng.choice(len(lang.biphones), size=n_frames, p=lang.biphone_frequencies)
    lengths = rng.geometric(1.0 / lang.mean_segment_frames, size=n_frames)
    ends = np.cumsum(lengths)
    used = int(np.searchsorted(ends, n_frames)) + 1
    starts = np.concatenate([[0], ends[: used - 1]])

    labels = np.repeat(segment_labels[:used], lengths[:used])[:n_frames]
    boundaries = starts[::segments_per_utterance]
    noise = rng.standard_normal((n_frames, lang.feature_dim))
    features = lang.means[labels] + lang.stddevs[labels] * noise
    return FrameCorpus(lang.name, features, labels, boundaries)


def split_indices(corpus: FrameCorpus, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Frame indices of each split; whole utterances only."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions}")
    n_utt = corpus.n_utterances
    if n_utt < len(fractions):
        raise EmptyInputError(f"{n_utt} utterances cannot fill {len(fractions)} splits")

    exact = np.array(fractions) * n_utt
    counts = np.floor(exact).astype(int)
    remainder_order = np.argsort(-(exact - counts), kind="stable")
    for k in remainder_order[: n_utt - counts.sum()]:
        counts[k] += 1
    while (counts == 0).any():
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1

    order = make_rng(seed, "split").permutation(n_utt)
    spans = corpus.utterance_spans()
    out, start = [], 0
    for count in counts:
        chosen = np.sort(order[start : start + count])
        start += count
        out.append(np.concatenate([np.arange(*spans[u]) for u in chosen]).astype(np.int64))
    return out


def subset_corpus(corpus: FrameCorpus, indices: np.ndarray) -> FrameCorpus:
    """Frames at ``indices`` (whole utterances, in order) as a new corpus."""
    starts = set(int(b) for b in corpus.utterance_boundaries)
    boundaries = [k for k, idx in enumerate(indices) if int(idx) in starts]
    return FrameCorpus(corpus.language, corpus.features[indices], corpus.labels[indices], boundaries)


def split_corpus(corpus: FrameCorpus, fractions: Sequence[float], seed: int) -> tuple[FrameCorpus, ...]:
    """Utterance-level split into ``len(fractions)`` corpora, e.g. train/val/test."""
    return tuple(subset_corpus(corpus, idx) for idx in split_indices(corpus, fractions, seed))
