"""Frame classifiers over tied biphone states.

A model's output classes are clusters of "units". For a monolingual model
the units are the language's biphones; a pooled model works over a union
inventory in which biphones of shared phonemes unify across languages.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import formats
from .config import AcousticModelConfig
from .core_math import NetworkParams, argmax_rows, forward_batched, one_hot, train
from .errors import ConfigError, DimensionMismatchError, EmptyInputError, FormatError
from .synthlang import FrameCorpus, LanguageSpec, concat_corpora

logger = logging.getLogger(__name__)


# ============================================================================
# State tying
# ============================================================================

@dataclass
class TiedStateInventory:
    """Disjoint clusters of unit indices; singletons are "restricted"."""

    language: str
    clusters: tuple[tuple[int, ...], ...]
    n_units: int

    def __post_init__(self):
        self.clusters = tuple(tuple(sorted(int(u) for u in c)) for c in self.clusters)
        seen = set()
        for cluster in self.clusters:
            if not cluster:
                raise ConfigError(f"{self.language}: empty cluster")
            for unit in cluster:
                if unit in seen or not (0 <= unit < self.n_units):
                    raise ConfigError(f"{self.language}: unit {unit} is repeated or out of range")
                seen.add(unit)

    @property
    def class_count(self) -> int:
        return len(self.clusters)

    @property
    def restricted(self) -> tuple[bool, ...]:
        return tuple(len(c) == 1 for c in self.clusters)

    @property
    def attested(self) -> frozenset[int]:
        return frozenset(u for c in self.clusters for u in c)

    @cached_property
    def class_of_unit(self) -> np.ndarray:
        """Class index per unit; -1 for units the tying corpus never saw."""
        table = np.full(self.n_units, -1, dtype=np.int64)
        for k, cluster in enumerate(self.clusters):
            table[list(cluster)] = k
        return table

    def restricted_units(self) -> frozenset[int]:
        return frozenset(c[0] for c in self.clusters if len(c) == 1)

    def translate(self, units: np.ndarray) -> np.ndarray:
        units = np.asarray(units, dtype=np.int64)
        if units.size and (units.min() < 0 or units.max() >= self.n_units):
            raise DimensionMismatchError(f"{self.language}: unit labels outside 0..{self.n_units - 1}")
        return self.class_of_unit[units]

    def to_manifest(self) -> dict:
        return {
            "language": self.language,
            "n_units": self.n_units,
            "clusters": [list(c) for c in self.clusters],
        }

    @classmethod
    def from_manifest(cls, data: dict) -> "TiedStateInventory":
        return cls(data["language"], tuple(tuple(c) for c in data["clusters"]), int(data["n_units"]))


def unit_means(corpus: FrameCorpus, n_units: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit feature sums divided by counts, and the counts."""
    n_units = n_units or int(corpus.labels.max()) + 1
    counts = np.bincount(corpus.labels, minlength=n_units)
    sums = np.zeros((n_units, corpus.feature_dim))
    np.add.at(sums, corpus.labels, corpus.features)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    return means, counts


def tie_states(
    corpus: FrameCorpus,
    target_class_count: int,
    min_solo_frames: int = 50,
    n_units: Optional[int] = None,
) -> TiedStateInventory:
    """Average-linkage agglomerative tying of the units attested in ``corpus``.

    Distances are Euclidean between per-unit feature means. Units with at
    least ``min_solo_frames`` frames stay out of every merge for as long as
    some merge between unprotected clusters remains. Ties go to the lowest
    unit indices.
    """
    if target_class_count < 1:
        raise ConfigError("target class count must be at least 1")
    if corpus.n_frames == 0:
        raise EmptyInputError("cannot tie states on an empty corpus")
    n_units = n_units or int(corpus.labels.max()) + 1
    means, counts = unit_means(corpus, n_units)
    attested = np.flatnonzero(counts)
    n = len(attested)
    if target_class_count > n:
        raise ConfigError(f"{target_class_count} classes requested but only {n} units are attested")

    dist = squareform(pdist(means[attested])) if n > 1 else np.zeros((1, 1))
    np.fill_diagonal(dist, np.inf)
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n)
    protected = counts[attested] >= min_solo_frames
    members = [[k] for k in range(n)]

    for _ in range(n - target_class_count):
        valid = upper & active[:, None] & active[None, :]
        preferred = valid & ~protected[:, None] & ~protected[None, :]
        allowed = preferred if preferred.any() else valid
        i, j = divmod(int(np.argmin(np.where(allowed, dist, np.inf))), n)

        merged = (sizes[i] * dist[i] + sizes[j] * dist[j]) / (sizes[i] + sizes[j])
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        sizes[i] += sizes[j]
        members[i].extend(members[j])
        active[j] = False
        protected[i] = False

    clusters = tuple(
        tuple(int(attested[k]) for k in sorted(members[c])) for c in np.flatnonzero(active)
    )
    tying = TiedStateInventory(corpus.language, clusters, n_units)
    logger.debug(
        "%s: tied %d units into %d classes (%d restricted)",
        corpus.language, n, tying.class_count, sum(tying.restricted),
    )
    return tying


# ============================================================================
# Posterior streams
# ============================================================================

class LabelSpace(IntEnum):
    TIED_CLASS = 0
    BIPHONE = 1


@dataclass
class PosteriorStream:
    """Per-frame posteriors of one model over one corpus, in frame order."""

    probs: np.ndarray
    labels: np.ndarray
    label_space: LabelSpace
    model_name: str
    corpus_language: str
    corpus_fingerprint: str

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_space = LabelSpace(self.label_space)
        if self.probs.ndim != 2 or len(self.probs) != len(self.labels):
            raise DimensionMismatchError("a stream needs one posterior row and one label per frame")

    @property
    def n_frames(self) -> int:
        return len(self.probs)

    @property
    def dim(self) -> int:
        return self.probs.shape[1]

    def to_bytes(self) -> bytes:
        return formats.stream_to_bytes(
            self.probs, self.labels, int(self.label_space),
            self.model_name, self.corpus_language, self.corpus_fingerprint,
        )

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "PosteriorStream":
        probs, labels, tag, model_name, language, fingerprint = formats.stream_from_bytes(blob, source)
        try:
            space = LabelSpace(tag)
        except ValueError as exc:
            raise FormatError(f"{source}: unknown label-space tag {tag}") from exc
        return cls(probs, labels, space, model_name, language, fingerprint)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: Path) -> "PosteriorStream":
        return cls.from_bytes(formats.read_blob(path), str(path))


def error_rates(probs: np.ndarray, classes: np.ndarray) -> tuple[Optional[float], float]:
    """(tied-class error over scored frames, lenient error over all frames).

    ``classes`` holds the true class per frame, -1 where the frame's unit
    has no class; such frames are wrong under the lenient count.
    """
    if len(probs) == 0:
        raise EmptyInputError("no frames to score")
    wrong = argmax_rows(probs) != classes
    scored = classes >= 0
    tied = float(wrong[scored].mean()) if scored.any() else None
    return tied, float(wrong.mean())


# ============================================================================
# Acoustic models
# ============================================================================

@dataclass
class AcousticModel:
    """A trained frame classifier plus the label spaces it understands.

    ``label_maps[lang]`` maps that language's biphone indices to this
    model's units.
    """

    name: str
    units: tuple[str, ...]
    tying: TiedStateInventory
    net: NetworkParams
    label_maps: dict[str, np.ndarray]
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.output_dim != self.tying.class_count:
            raise DimensionMismatchError(
                f"{self.name}: network has {self.net.output_dim} outputs for {self.tying.class_count} classes"
            )
        if len(self.units) != self.tying.n_units:
            raise DimensionMismatchError(f"{self.name}: {len(self.units)} units vs tying over {self.tying.n_units}")

    @property
    def language(self) -> str:
        return self.tying.language

    @property
    def languages(self) -> tuple[str, ...]:
        return tuple(sorted(self.label_maps))

    @property
    def class_count(self) -> int:
        return self.tying.class_count

    def unit_labels(self, corpus: FrameCorpus) -> np.ndarray:
        if corpus.language not in self.label_maps:
            raise ConfigError(f"model {self.name} has no label map for {corpus.language}")
        return self.label_maps[corpus.language][corpus.labels]

    def class_labels(self, corpus: FrameCorpus) -> np.ndarray:
        return self.tying.translate(self.unit_labels(corpus))

    def error_on(self, corpus: FrameCorpus) -> tuple[Optional[float], float]:
        return error_rates(forward_batched(self.net, corpus.features), self.class_labels(corpus))

    def save(self, stem: Path) -> list[Path]:
        meta = {
            "name": self.name,
            "units": list(self.units),
            "tying": self.tying.to_manifest(),
            "label_maps": {lang: m.tolist() for lang, m in sorted(self.label_maps.items())},
            "train": self.train_meta,
        }
        return formats.save_network(stem, self.net, self.train_meta.get("seed", 0), meta)

    @classmethod
    def load(cls, stem: Path) -> "AcousticModel":
        net, manifest = formats.load_network(stem)
        meta = manifest["meta"]
        return cls(
            name=meta["name"],
            units=tuple(meta["units"]),
            tying=TiedStateInventory.from_manifest(meta["tying"]),
            net=net,
            label_maps={lang: np.asarray(m, dtype=np.int64) for lang, m in meta["label_maps"].items()},
            train_meta=meta.get("train", {}),
        )


def posteriors(model: AcousticModel, corpus: FrameCorpus) -> PosteriorStream:
    """Forward every frame of ``corpus`` through ``model``.

    Labels become the model's tied classes when the model knows the corpus
    language; otherwise the raw biphone labels are kept.
    """
    if corpus.feature_dim != model.net.input_dim:
        raise DimensionMismatchError(
            f"corpus dim {corpus.feature_dim} does not match model {model.name} input {model.net.input_dim}"
        )
    probs = forward_batched(model.net, corpus.features)
    if corpus.language in model.label_maps:
        labels, space = model.class_labels(corpus), LabelSpace.TIED_CLASS
    else:
        labels, space = corpus.labels, LabelSpace.BIPHONE
    return PosteriorStream(probs, labels, space, model.name, corpus.language, corpus.fingerprint)


def _fit(
    name: str,
    units: Sequence[str],
    tying: TiedStateInventory,
    label_maps: dict[str, np.ndarray],
    train_units: FrameCorpus,
    val_units: Optional[FrameCorpus],
    cfg: AcousticModelConfig,
    verbose: bool,
) -> AcousticModel:
    """Train a classifier on corpora already relabeled to model units."""
    dims = (train_units.feature_dim, *cfg.network.hidden_dims, tying.class_count)
    net = NetworkParams.initialize(dims, cfg.network.activation, cfg.train.rng_seed)

    classes = tying.translate(train_units.labels)
    keep = classes >= 0
    x, t = train_units.features[keep], one_hot(classes[keep], tying.class_count)
    xv = tv = None
    if val_units is not None and val_units.n_frames:
        val_classes = tying.translate(val_units.labels)
        scored = val_classes >= 0
        xv, tv = val_units.features[scored], one_hot(val_classes[scored], tying.class_count)

    result = train(net, x, t, xv, tv, cfg.train, verbose=verbose, desc=f"am {name}")

    meta = {
        "seed": int(cfg.train.rng_seed),
        "train_fingerprint": train_units.fingerprint,
        "train_frames": int(len(x)),
        "best_epoch": int(result.best_epoch),
        "epochs_run": len(result.history) - 1,
        "best_val_kl": float(result.best_val_kl),
    }
    if val_units is not None and val_units.n_frames:
        tied, lenient = error_rates(forward_batched(result.net, val_units.features), tying.translate(val_units.labels))
        meta["val_frame_error"] = tied
        meta["val_lenient_error"] = lenient
        logger.info("acoustic model %s: %d classes, val frame error %.4f", name, tying.class_count, tied if tied is not None else float("nan"))
    return AcousticModel(name, tuple(units), tying, result.net, label_maps, meta)


def train_acoustic_model(
    train_corpus: FrameCorpus,
    val_corpus: Optional[FrameCorpus],
    tying: TiedStateInventory,
    cfg: AcousticModelConfig = AcousticModelConfig(),
    units: Optional[Sequence[str]] = None,
    verbose: bool = False,
) -> AcousticModel:
    """Monolingual model: one-hot tied-class targets, validation error logged."""
    for corpus in (train_corpus, val_corpus):
        if corpus is not None and corpus.language != tying.language:
            raise ConfigError(f"corpus of {corpus.language} used with the {tying.language} tying")
    units = tuple(units) if units is not None else tuple(f"u{k}" for k in range(tying.n_units))
    label_maps = {tying.language: np.arange(tying.n_units, dtype=np.int64)}
    return _fit(tying.language, units, tying, label_maps, train_corpus, val_corpus, cfg, verbose)


def build_monolingual(
    lang: LanguageSpec,
    train_corpus: FrameCorpus,
    val_corpus: Optional[FrameCorpus],
    cfg: AcousticModelConfig = AcousticModelConfig(),
    verbose: bool = False,
) -> AcousticModel:
    """Tie the language's biphones on ``train_corpus`` and train its model."""
    n_units = len(lang.biphones)
    attested = len(np.unique(train_corpus.labels))
    target = max(1, round(cfg.tying_fraction * attested))
    tying = tie_states(train_corpus, target, cfg.min_solo_frames, n_units)
    return train_acoustic_model(
        train_corpus, val_corpus, tying, cfg, [b.key for b in lang.biphones], verbose
    )


# ============================================================================
# Pooled models
# ============================================================================

def pooled_units(langs: Sequence[LanguageSpec]) -> tuple[tuple[str, ...], dict[str, np.ndarray]]:
    """Union unit inventory of several languages.

    A biphone whose phonemes both occur in another pooled language is keyed
    by its symbols and so unifies across languages; any other biphone is
    tagged with its language.
    """
    unique: dict[str, LanguageSpec] = {}
    for lang in langs:
        unique.setdefault(lang.name, lang)
    counts: dict[str, int] = {}
    for lang in unique.values():
        for p in lang.phonemes:
            counts[p] = counts.get(p, 0) + 1

    units: dict[str, int] = {}
    label_maps = {}
    for lang in unique.values():
        mapping = []
        for b in lang.biphones:
            shared = counts[b.left] > 1 and counts[b.center] > 1
            key = b.key if shared else f"{lang.name}:{b.key}"
            mapping.append(units.setdefault(key, len(units)))
        label_maps[lang.name] = np.asarray(mapping, dtype=np.int64)
    return tuple(units), label_maps


def pooled_name(names: Sequence[str]) -> str:
    return "pool-" + "+".join(dict.fromkeys(names))


def train_pooled_model(
    langs: Sequence[LanguageSpec],
    train_corpora: Sequence[FrameCorpus],
    val_corpora: Sequence[FrameCorpus] = (),
    cfg: AcousticModelConfig = AcousticModelConfig(),
    verbose: bool = False,
) -> AcousticModel:
    """Multilingual baseline trained on the concatenation of all corpora.

    Repeated languages are pooled once in the inventory; their corpora are
    all used.
    """
    if len(train_corpora) < 2:
        raise ConfigError("a pooled model needs at least two corpora")
    units, label_maps = pooled_units(langs)
    missing = sorted({c.language for c in (*train_corpora, *val_corpora)} - set(label_maps))
    if missing:
        raise ConfigError(f"no language spec for pooled corpora: {missing}")
    name = pooled_name([lang.name for lang in langs])

    def relabel(corpora):
        return concat_corpora(
            [FrameCorpus(name, c.features, label_maps[c.language][c.labels], c.utterance_boundaries) for c in corpora],
            name,
        )

    pooled_train = relabel(train_corpora)
    pooled_val = relabel(val_corpora) if val_corpora else None
    attested = len(np.unique(pooled_train.labels))
    target = max(1, round(cfg.tying_fraction * attested))
    tying = tie_states(pooled_train, target, cfg.min_solo_frames, len(units))
    return _fit(name, units, tying, label_maps, pooled_train, pooled_val, cfg, verbose)


# ============================================================================
# Per-phoneme degradation
# ============================================================================

@dataclass(frozen=True)
class PhonemeErrorDelta:
    phoneme: str
    frames: int
    mono_error: float
    pooled_error: float
    delta_points: float
    relative_change: Optional[float]


@dataclass
class DegradationTable:
    language: str
    pooled_model: str
    rows: list[PhonemeErrorDelta]
    excluded: list[str]

    HEADER = ("phoneme", "frames", "mono_error", "pooled_error", "delta_points", "relative_change")

    def csv_rows(self):
        return [
            (r.phoneme, r.frames, r.mono_error, r.pooled_error, r.delta_points, r.relative_change)
            for r in self.rows
        ]

    @property
    def mean_delta_points(self) -> Optional[float]:
        return float(np.mean([r.delta_points for r in self.rows])) if self.rows else None


def per_class_error_delta(
    mono: AcousticModel,
    pooled: AcousticModel,
    test: FrameCorpus,
    lang: LanguageSpec,
    shared: Optional[Sequence[str]] = None,
) -> DegradationTable:
    """Biphone-lenient frame error of both models per center phoneme.

    ``shared`` restricts the table to those phonemes (default: the whole
    inventory). Phonemes without test frames are listed as excluded.
    """
    test.check_labels(lang)
    mono_wrong = argmax_rows(forward_batched(mono.net, test.features)) != mono.class_labels(test)
    pooled_wrong = argmax_rows(forward_batched(pooled.net, test.features)) != pooled.class_labels(test)
    centers = np.array([lang.phonemes.index(b.center) for b in lang.biphones], dtype=np.int64)
    frame_center = centers[test.labels]

    phonemes = sorted(shared) if shared is not None else list(lang.phonemes)
    rows, excluded = [], []
    for symbol in phonemes:
        if symbol not in lang.phonemes:
            excluded.append(symbol)
            continue
        mask = frame_center == lang.phonemes.index(symbol)
        if not mask.any():
            excluded.append(symbol)
            continue
        m_err = float(mono_wrong[mask].mean())
        p_err = float(pooled_wrong[mask].mean())
        rows.append(
            PhonemeErrorDelta(
                symbol, int(mask.sum()), m_err, p_err, 100.0 * (p_err - m_err),
                (p_err - m_err) / m_err if m_err > 0 else None,
            )
        )
    return DegradationTable(lang.name, pooled.name, rows, excluded)
