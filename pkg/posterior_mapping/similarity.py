"""Cross-lingual similarity analysis.

Target biphones are split by what a source language knows about them:

- SS: both phonemes shared and the biphone seen in source training data
- SU: both phonemes shared but the biphone never seen by the source
- U: at least one phoneme the source language lacks

The R-prefixed rows restrict each subset to biphones that sit alone in a
target cluster.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .acoustic_model import AcousticModel, PosteriorStream, TiedStateInventory
from .core_math import argmax_rows, entropy_rows, kl_rows
from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    FingerprintMismatchError,
    MissingPairError,
)
from .mapping_network import ProbeResult
from .synthlang import Biphone, LanguageSpec

logger = logging.getLogger(__name__)


class SubsetTag(str, Enum):
    SS = "SS"
    SU = "SU"
    U = "U"


ROW_NAMES = ("SS", "SU", "U", "RSS", "RSU", "RU")
SAMC_ROWS = ("SS", "RSS")


@dataclass
class BiphoneSubsetPartition:
    target: str
    source: str
    tags: tuple[SubsetTag, ...]
    restricted: tuple[bool, ...]

    def members(self, row: str) -> frozenset[int]:
        """Biphone indices of a row name such as ``"SS"`` or ``"RSU"``."""
        only_restricted = row.startswith("R")
        tag = SubsetTag(row[1:] if only_restricted else row)
        return frozenset(
            k for k, (t, r) in enumerate(zip(self.tags, self.restricted))
            if t is tag and (r or not only_restricted)
        )

    def counts(self) -> dict[str, int]:
        return {row: len(self.members(row)) for row in ROW_NAMES}

    def frame_mask(self, row: str, alignment: np.ndarray) -> np.ndarray:
        selected = np.zeros(len(self.tags), dtype=bool)
        selected[list(self.members(row))] = True
        return selected[alignment]


def partition_biphones(
    target_lang: LanguageSpec,
    source_lang: LanguageSpec,
    source_train_attested: Iterable[Biphone],
    target_tying: TiedStateInventory,
) -> BiphoneSubsetPartition:
    attested = set(source_train_attested)
    stray = attested - set(source_lang.biphones)
    if stray:
        raise ConfigError(f"attested biphones outside the {source_lang.name} inventory: {sorted(b.key for b in stray)[:5]}")
    if target_tying.n_units != len(target_lang.biphones):
        raise DimensionMismatchError(f"tying covers {target_tying.n_units} units, {target_lang.name} has {len(target_lang.biphones)} biphones")

    source_phonemes = set(source_lang.phonemes)
    solo = target_tying.restricted_units()
    tags, restricted = [], []
    for k, b in enumerate(target_lang.biphones):
        if b.left not in source_phonemes or b.center not in source_phonemes:
            tags.append(SubsetTag.U)
        elif b in attested:
            tags.append(SubsetTag.SS)
        else:
            tags.append(SubsetTag.SU)
        restricted.append(k in solo)
    return BiphoneSubsetPartition(target_lang.name, source_lang.name, tuple(tags), tuple(restricted))


def attested_biphones(lang: LanguageSpec, labels: np.ndarray) -> frozenset[Biphone]:
    return frozenset(lang.biphones[k] for k in np.unique(labels))


def build_cross_class_map(
    target_lang: LanguageSpec,
    source_lang: LanguageSpec,
    source_model: AcousticModel,
) -> np.ndarray:
    """Source-model class of every target biphone, -1 where the source has none."""
    unit_of = source_model.label_maps[source_lang.name]
    out = np.full(len(target_lang.biphones), -1, dtype=np.int64)
    for k, b in enumerate(target_lang.biphones):
        index = source_lang.biphone_index.get(b)
        if index is not None:
            out[k] = source_model.tying.class_of_unit[unit_of[index]]
    return out


def samc_correct(
    source_stream: PosteriorStream,
    partition: BiphoneSubsetPartition,
    alignment: np.ndarray,
    cross_class_map: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Source-model class hits on SS frames.

    Returns ``(defined, correct)``: ``defined`` marks frames whose true
    biphone is SS with a known source class, ``correct`` those where the
    source posterior's argmax (lowest index on ties) is that class.
    """
    alignment = np.asarray(alignment, dtype=np.int64)
    if len(alignment) != source_stream.n_frames:
        raise DimensionMismatchError(f"{len(alignment)} aligned labels for {source_stream.n_frames} frames")
    expected = cross_class_map[alignment]
    defined = partition.frame_mask("SS", alignment) & (expected >= 0)
    correct = defined & (argmax_rows(source_stream.probs) == expected)
    return defined, correct


# ============================================================================
# Reports
# ============================================================================

@dataclass(frozen=True)
class SubsetRow:
    name: str
    frames: int
    mean_kl: Optional[float] = None
    mean_kl_samc: Optional[float] = None
    pct_correct_samc: Optional[float] = None
    mean_entropy: Optional[float] = None
    mean_entropy_samc: Optional[float] = None


@dataclass
class SimilarityReport:
    """Per-subset statistics of one (target, source) pair; empty rows hold None."""

    target: str
    source: str
    frames: int
    d_x: float
    rows: dict[str, SubsetRow] = field(default_factory=dict)

    HEADER = (
        "target", "source", "subset", "frames", "mean_kl", "mean_kl_samc",
        "pct_correct_samc", "mean_entropy", "mean_entropy_samc",
    )

    def csv_rows(self):
        for name in ROW_NAMES:
            r = self.rows[name]
            yield (
                self.target, self.source, name, r.frames, r.mean_kl, r.mean_kl_samc,
                r.pct_correct_samc, r.mean_entropy, r.mean_entropy_samc,
            )

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "source": self.source,
            "frames": self.frames,
            "d_x": self.d_x,
            "rows": {name: vars(row) for name, row in self.rows.items()},
        }


def _mean(values: np.ndarray, mask: np.ndarray) -> Optional[float]:
    return float(values[mask].mean()) if mask.any() else None


def subset_report(
    target_stream: PosteriorStream,
    mapped_stream: PosteriorStream,
    partition: BiphoneSubsetPartition,
    alignment: np.ndarray,
    source_stream: Optional[PosteriorStream] = None,
    cross_class_map: Optional[np.ndarray] = None,
) -> SimilarityReport:
    """KL(target || mapped) and entropy of the mapped posteriors, per subset.

    SAMC columns of the SS and RSS rows need ``source_stream`` and
    ``cross_class_map``; they stay None otherwise.
    """
    if target_stream.n_frames == 0:
        raise EmptyInputError("empty test stream")
    if target_stream.corpus_fingerprint != mapped_stream.corpus_fingerprint:
        raise FingerprintMismatchError("target and mapped streams come from different corpora")
    alignment = np.asarray(alignment, dtype=np.int64)
    if len(alignment) != target_stream.n_frames or mapped_stream.n_frames != target_stream.n_frames:
        raise DimensionMismatchError("streams and alignment must cover the same frames")

    kl = kl_rows(target_stream.probs, mapped_stream.probs)
    ent = entropy_rows(mapped_stream.probs)
    correct = None
    if source_stream is not None and cross_class_map is not None:
        _, correct = samc_correct(source_stream, partition, alignment, cross_class_map)

    rows = {}
    for name in ROW_NAMES:
        mask = partition.frame_mask(name, alignment)
        frames = int(mask.sum())
        row = SubsetRow(name, frames, _mean(kl, mask), mean_entropy=_mean(ent, mask))
        if correct is not None and name in SAMC_ROWS and frames:
            hit = mask & correct
            row = SubsetRow(
                name, frames, row.mean_kl,
                mean_kl_samc=_mean(kl, hit),
                pct_correct_samc=100.0 * float(hit.sum()) / frames,
                mean_entropy=row.mean_entropy,
                mean_entropy_samc=_mean(ent, hit),
            )
        rows[name] = row

    report = SimilarityReport(partition.target, partition.source, target_stream.n_frames, float(kl.mean()), rows)
    logger.debug("%s <- %s: D_X %.4f", report.target, report.source, report.d_x)
    return report


# ============================================================================
# Language-by-language tables
# ============================================================================

@dataclass
class LanguageMatrix:
    """Square table with rows = target language, columns = source language."""

    languages: tuple[str, ...]
    values: np.ndarray

    def __getitem__(self, pair: tuple[str, str]) -> float:
        target, source = pair
        return float(self.values[self.languages.index(target), self.languages.index(source)])

    def csv_header(self) -> list[str]:
        return ["target", *self.languages]

    def csv_rows(self):
        for lang, row in zip(self.languages, self.values):
            yield [lang, *(None if np.isnan(v) else float(v) for v in row)]

    def to_dict(self) -> dict:
        return {
            target: {
                source: (None if np.isnan(v) else float(v)) for source, v in zip(self.languages, row)
            }
            for target, row in zip(self.languages, self.values)
        }


def _off_diagonal(languages: Sequence[str]) -> list[tuple[str, str]]:
    return [(t, s) for t in languages for s in languages if t != s]


def similarity_matrix(reports: Iterable[SimilarityReport], languages: Sequence[str]) -> LanguageMatrix:
    """D_X per ordered pair; the diagonal is 0 (identity mapping)."""
    by_pair = {(r.target, r.source): r for r in reports}
    missing = [pair for pair in _off_diagonal(languages) if pair not in by_pair]
    if missing:
        raise MissingPairError(missing)
    n = len(languages)
    values = np.zeros((n, n))
    for i, t in enumerate(languages):
        for j, s in enumerate(languages):
            if i != j:
                values[i, j] = by_pair[(t, s)].d_x
    return LanguageMatrix(tuple(languages), values)


def entropy_matrix(probes: Mapping[tuple[str, str], ProbeResult], languages: Sequence[str], n: int) -> LanguageMatrix:
    """Mean of the ``n`` lowest probe entropies per (target, source) mapping.

    The diagonal has no mapping network and is left empty (NaN).
    """
    missing = [pair for pair in _off_diagonal(languages) if pair not in probes]
    if missing:
        raise MissingPairError(missing)
    size = len(languages)
    values = np.full((size, size), np.nan)
    for i, t in enumerate(languages):
        for j, s in enumerate(languages):
            if i != j:
                probe = probes[(t, s)]
                values[i, j] = float(probe.lowest_entropies(min(n, probe.source_dim)).mean())
    return LanguageMatrix(tuple(languages), values)


def overlap_table(langs: Sequence[LanguageSpec]) -> LanguageMatrix:
    """Cell (i, j) = |P_i & P_j| / |P_j| * 100: the share of j's phonemes i also has."""
    if len(langs) < 2:
        raise ConfigError("an overlap table needs at least two languages")
    sets = [set(lang.phonemes) for lang in langs]
    values = np.array(
        [[100.0 * len(a & b) / len(b) for b in sets] for a in sets]
    )
    return LanguageMatrix(tuple(lang.name for lang in langs), values)


# ============================================================================
# SAMC confusions
# ============================================================================

@dataclass(frozen=True)
class SamcConfusion:
    biphone: int
    expected_class: int
    frames: int
    hit_rate: float
    confusions: tuple[tuple[int, int], ...]  # (source class, frame count), most frequent first


def samc_confusions(
    source_stream: PosteriorStream,
    partition: BiphoneSubsetPartition,
    alignment: np.ndarray,
    cross_class_map: np.ndarray,
    top: int = 3,
) -> list[SamcConfusion]:
    """For each SS biphone with frames: the classes the source model picks instead."""
    alignment = np.asarray(alignment, dtype=np.int64)
    defined, correct = samc_correct(source_stream, partition, alignment, cross_class_map)
    predicted = argmax_rows(source_stream.probs)
    out = []
    for k in sorted(partition.members("SS")):
        mask = defined & (alignment == k)
        frames = int(mask.sum())
        if not frames:
            continue
        wrong = Counter(int(c) for c in predicted[mask & ~correct])
        ranked = sorted(wrong.items(), key=lambda item: (-item[1], item[0]))[:top]
        out.append(
            SamcConfusion(k, int(cross_class_map[k]), frames, float(correct[mask].mean()), tuple(ranked))
        )
    return out
