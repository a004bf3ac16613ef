"""Weighted fusion of target and mapped source posteriors."""

import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .acoustic_model import LabelSpace, PosteriorStream, TiedStateInventory, error_rates
from .core_math import argmax_rows, check_distributions
from .errors import ConfigError, DimensionMismatchError, EmptyInputError, FingerprintMismatchError

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOLERANCE = 1e-9


class FusionConfig(BaseModel):
    """Fusion weights: one for the target model, one per mapped source."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    target_weight: float = Field(1.0, ge=0.0, le=1.0)
    source_weights: tuple[float, ...] = ()

    @model_validator(mode="after")
    def _simplex(self):
        if any(not 0.0 <= w <= 1.0 for w in self.source_weights):
            raise ValueError("source weights must lie in [0, 1]")
        total = self.target_weight + sum(self.source_weights)
        if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ValueError(f"fusion weights sum to {total}, not 1")
        return self

    @property
    def weights(self) -> tuple[float, ...]:
        return (self.target_weight, *self.source_weights)


def _combine(target: np.ndarray, sources: Sequence[np.ndarray], cfg: FusionConfig) -> np.ndarray:
    if len(sources) != len(cfg.source_weights):
        raise DimensionMismatchError(f"{len(sources)} sources for {len(cfg.source_weights)} source weights")
    for p in sources:
        if p.shape != target.shape:
            raise DimensionMismatchError(f"source shape {p.shape} does not match target {target.shape}")
    check_distributions(target, "target posteriors")
    for p in sources:
        check_distributions(p, "mapped posteriors")
    # Zero-weight terms are skipped so the pure cases reproduce their input exactly.
    out = cfg.target_weight * target if cfg.target_weight else np.zeros_like(target)
    for w, p in zip(cfg.source_weights, sources):
        if w:
            out = out + w * p
    return out


def fuse_frame(target_p, mapped_ps: Sequence, cfg: FusionConfig) -> np.ndarray:
    """w_T * p_target + sum_i w_i * p_i for one frame."""
    target = np.asarray(target_p, dtype=np.float64)
    if target.ndim != 1:
        raise DimensionMismatchError("fuse_frame expects vectors")
    return _combine(target, [np.asarray(p, dtype=np.float64) for p in mapped_ps], cfg)


def _check_aligned(target: PosteriorStream, mapped: Sequence[PosteriorStream]):
    for stream in mapped:
        if stream.corpus_fingerprint != target.corpus_fingerprint:
            raise FingerprintMismatchError(
                f"{stream.model_name} was computed on a different corpus than {target.model_name}"
            )
        if stream.n_frames != target.n_frames:
            raise DimensionMismatchError(f"{stream.model_name}: {stream.n_frames} frames vs {target.n_frames}")


def fuse_stream(target_stream: PosteriorStream, mapped_streams: Sequence[PosteriorStream], cfg: FusionConfig) -> PosteriorStream:
    _check_aligned(target_stream, mapped_streams)
    probs = _combine(target_stream.probs, [s.probs for s in mapped_streams], cfg)
    return PosteriorStream(
        probs,
        target_stream.labels,
        target_stream.label_space,
        f"fused({target_stream.model_name})",
        target_stream.corpus_language,
        target_stream.corpus_fingerprint,
    )


@dataclass(frozen=True)
class FrameError:
    tied: Optional[float]
    lenient: float
    frames: int


def _true_classes(stream: PosteriorStream, tying: TiedStateInventory) -> np.ndarray:
    if stream.label_space is LabelSpace.TIED_CLASS:
        return stream.labels
    return tying.translate(stream.labels)


def frame_error(stream: PosteriorStream, tying: TiedStateInventory) -> FrameError:
    """Tied-class error over scored frames and biphone-lenient error over all frames."""
    if stream.n_frames == 0:
        raise EmptyInputError("empty stream")
    if stream.dim != tying.class_count:
        raise DimensionMismatchError(f"stream dim {stream.dim} vs {tying.class_count} tied classes")
    tied, lenient = error_rates(stream.probs, _true_classes(stream, tying))
    return FrameError(tied, lenient, stream.n_frames)


# ============================================================================
# Weight search
# ============================================================================

def simplex_grid(parts: int, resolution: int) -> Iterator[tuple[int, ...]]:
    """All tuples of ``parts`` non-negative integers summing to ``resolution``."""
    if parts == 1:
        yield (resolution,)
        return
    for first in range(resolution, -1, -1):
        for rest in simplex_grid(parts - 1, resolution - first):
            yield (first, *rest)


def grid_resolution(grid_step: float) -> int:
    if not 0.0 < grid_step <= 0.5:
        raise ConfigError(f"grid_step must be in (0, 0.5], got {grid_step}")
    resolution = round(1.0 / grid_step)
    if abs(resolution * grid_step - 1.0) > 1e-9:
        raise ConfigError(f"1/grid_step must be an integer, got {1.0 / grid_step}")
    return resolution


@dataclass
class WeightSearch:
    config: FusionConfig
    error: float
    trace: list[tuple[tuple[float, ...], float]] = field(default_factory=list)

    def trace_header(self, sources: Sequence[str]) -> list[str]:
        return ["w_target", *(f"w_{s}" for s in sources), "val_error"]

    def trace_rows(self):
        for weights, error in self.trace:
            yield [*weights, error]


def search_weights(
    target_stream_val: PosteriorStream,
    mapped_streams_val: Sequence[PosteriorStream],
    tying: TiedStateInventory,
    grid_step: float = 0.1,
) -> WeightSearch:
    """Exhaustive simplex grid search for the lowest validation tied-class error.

    Ties prefer the larger target weight, then the lexicographically
    smaller source weights.
    """
    if target_stream_val.n_frames == 0:
        raise EmptyInputError("empty validation stream")
    _check_aligned(target_stream_val, mapped_streams_val)
    resolution = grid_resolution(grid_step)
    classes = _true_classes(target_stream_val, tying)
    scored = classes >= 0
    if not scored.any():
        raise EmptyInputError("no scored validation frames")
    truth = classes[scored]
    target = target_stream_val.probs[scored]
    sources = [s.probs[scored] for s in mapped_streams_val]

    trace = []
    best_key, best = None, None
    for point in simplex_grid(1 + len(sources), resolution):
        cfg = FusionConfig(
            target_weight=point[0] / resolution,
            source_weights=tuple(k / resolution for k in point[1:]),
        )
        errors = int((argmax_rows(_combine(target, sources, cfg)) != truth).sum())
        trace.append((cfg.weights, errors / len(truth)))
        key = (errors, -point[0], point[1:])
        if best_key is None or key < best_key:
            best_key, best = key, cfg

    error = best_key[0] / len(truth)
    logger.info("fusion weights for %s: %s (val error %.4f)", target_stream_val.corpus_language, best.weights, error)
    return WeightSearch(best, error, trace)


def relative_improvement(baseline: Optional[float], value: Optional[float]) -> Optional[float]:
    """Percent reduction of ``value`` against ``baseline``."""
    if baseline is None or value is None or baseline <= 0:
        return None
    return 100.0 * (baseline - value) / baseline
