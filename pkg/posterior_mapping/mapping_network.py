"""Mapping networks: translate source-model posteriors into a target model's class space."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats
from .acoustic_model import PosteriorStream
from .config import MappingConfig
from .core_math import NetworkParams, entropy_rows, floor_distributions, forward_batched, train
from .errors import ConfigError, DimensionMismatchError, EmptyInputError, FingerprintMismatchError

logger = logging.getLogger(__name__)


@dataclass
class PairedDataset:
    """Frame-aligned (source posterior, target posterior) pairs from one corpus."""

    inputs: np.ndarray
    targets: np.ndarray
    corpus_fingerprint: str
    source_model: str
    target_model: str

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def target_dim(self) -> int:
        return self.targets.shape[1]


def build_training_pairs(source_stream: PosteriorStream, target_stream: PosteriorStream) -> PairedDataset:
    """Pair frame t of the source stream with frame t of the target stream."""
    if source_stream.corpus_fingerprint != target_stream.corpus_fingerprint:
        raise FingerprintMismatchError(
            f"streams come from different corpora ({source_stream.corpus_language}:"
            f"{source_stream.corpus_fingerprint} vs {target_stream.corpus_language}:"
            f"{target_stream.corpus_fingerprint})"
        )
    if source_stream.n_frames != target_stream.n_frames:
        raise DimensionMismatchError(f"{source_stream.n_frames} vs {target_stream.n_frames} frames")
    return PairedDataset(
        source_stream.probs,
        target_stream.probs,
        source_stream.corpus_fingerprint,
        source_stream.model_name,
        target_stream.model_name,
    )


@dataclass
class MappingNetwork:
    source_model_id: str
    target_model_id: str
    net: NetworkParams
    log_inputs: bool = False
    train_meta: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.source_model_id}->{self.target_model_id}"

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    @property
    def output_dim(self) -> int:
        return self.net.output_dim

    def prepare(self, probs: np.ndarray) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        return np.log(floor_distributions(probs)) if self.log_inputs else probs

    def transform(self, probs: np.ndarray) -> np.ndarray:
        probs = np.atleast_2d(probs)
        if probs.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"{self.name}: input dim {probs.shape[1]}, network expects {self.input_dim}"
            )
        return forward_batched(self.net, self.prepare(probs))

    def save(self, stem: Path) -> list[Path]:
        meta = {
            "source_model": self.source_model_id,
            "target_model": self.target_model_id,
            "log_inputs": self.log_inputs,
            "train": self.train_meta,
        }
        return formats.save_network(stem, self.net, self.train_meta.get("seed", 0), meta)

    @classmethod
    def load(cls, stem: Path) -> "MappingNetwork":
        net, manifest = formats.load_network(stem)
        meta = manifest["meta"]
        return cls(meta["source_model"], meta["target_model"], net, bool(meta["log_inputs"]), meta.get("train", {}))


def mapping_dims(source_dim: int, target_dim: int, cfg: MappingConfig) -> tuple[int, ...]:
    hidden = cfg.hidden_dims if cfg.hidden_dims is not None else (cfg.width_factor * max(source_dim, target_dim),)
    return (source_dim, *hidden, target_dim)


def train_mapping(
    pairs: PairedDataset,
    val_pairs: Optional[PairedDataset] = None,
    cfg: MappingConfig = MappingConfig(),
    verbose: bool = False,
) -> MappingNetwork:
    """Fit a mapping network by minimizing mean KL(target || mapped)."""
    if len(pairs) == 0:
        raise EmptyInputError("no training pairs")
    if val_pairs is not None and (
        val_pairs.input_dim != pairs.input_dim or val_pairs.target_dim != pairs.target_dim
    ):
        raise DimensionMismatchError("validation pairs do not match training pair dims")

    dims = mapping_dims(pairs.input_dim, pairs.target_dim, cfg)
    mapnet = MappingNetwork(
        pairs.source_model,
        pairs.target_model,
        NetworkParams.initialize(dims, cfg.activation, cfg.train.rng_seed),
        cfg.log_inputs,
    )
    has_val = val_pairs is not None and len(val_pairs) > 0
    result = train(
        mapnet.net,
        mapnet.prepare(pairs.inputs),
        pairs.targets,
        mapnet.prepare(val_pairs.inputs) if has_val else None,
        val_pairs.targets if has_val else None,
        cfg.train,
        verbose=verbose,
        desc=f"map {mapnet.name}",
    )
    mapnet.net = result.net
    mapnet.train_meta = {
        "seed": int(cfg.train.rng_seed),
        "corpus_fingerprint": pairs.corpus_fingerprint,
        "train_frames": len(pairs),
        "val_frames": len(val_pairs) if has_val else 0,
        "best_epoch": int(result.best_epoch),
        "epochs_run": len(result.history) - 1,
        "final_val_kl": float(result.best_val_kl),
    }
    logger.info("mapping %s: val KL %.4f (epoch %d)", mapnet.name, result.best_val_kl, result.best_epoch)
    return mapnet


def map_stream(mapnet: MappingNetwork, source_stream: PosteriorStream) -> PosteriorStream:
    """Source posteriors translated into the target class space; labels carried through."""
    if source_stream.dim != mapnet.input_dim:
        raise DimensionMismatchError(
            f"stream dim {source_stream.dim} does not match {mapnet.name} input {mapnet.input_dim}"
        )
    return PosteriorStream(
        mapnet.transform(source_stream.probs),
        source_stream.labels,
        source_stream.label_space,
        mapnet.name,
        source_stream.corpus_language,
        source_stream.corpus_fingerprint,
    )


# ============================================================================
# One-hot probing
# ============================================================================

@dataclass
class ProbeResult:
    """Mapped distribution and its entropy for every one-hot source class."""

    mapping: str
    probs: np.ndarray  # (d_S, d_A), row k = mapped one-hot of class k
    entropies: np.ndarray

    @property
    def source_dim(self) -> int:
        return self.probs.shape[0]

    @property
    def target_dim(self) -> int:
        return self.probs.shape[1]

    def lowest_entropies(self, n: int) -> np.ndarray:
        return np.sort(self.entropies, kind="stable")[:n]


def probe_one_hot(mapnet: MappingNetwork) -> ProbeResult:
    probs = mapnet.transform(np.eye(mapnet.input_dim))
    return ProbeResult(mapnet.name, probs, entropy_rows(probs))


@dataclass
class Posteriorgram:
    """Lowest-entropy source classes with their top mapped classes."""

    mapping: str
    source_classes: np.ndarray
    entropies: np.ndarray  # non-decreasing
    top_classes: np.ndarray  # (n, top_k)
    top_probs: np.ndarray  # (n, top_k), descending per row

    @property
    def top_k(self) -> int:
        return self.top_classes.shape[1]

    @property
    def mean_entropy(self) -> float:
        return float(self.entropies.mean())

    def csv_header(self) -> list[str]:
        header = ["source_class", "entropy"]
        for i in range(1, self.top_k + 1):
            header += [f"mapped_class_{i}", f"prob_{i}"]
        return header

    def csv_rows(self):
        for k, ent, classes, probs in zip(self.source_classes, self.entropies, self.top_classes, self.top_probs):
            row = [int(k), float(ent)]
            for c, p in zip(classes, probs):
                row += [int(c), float(p)]
            yield row


def top_n_posteriorgram(probe: ProbeResult, n: int, top_k: int) -> Posteriorgram:
    """The ``n`` source classes with the lowest probe entropy, ascending.

    Ties keep the lower class index first, both among source classes and
    among each row's top mapped classes.
    """
    if not 1 <= n <= probe.source_dim:
        raise ConfigError(f"n={n} outside 1..{probe.source_dim}")
    if not 1 <= top_k <= probe.target_dim:
        raise ConfigError(f"top_k={top_k} outside 1..{probe.target_dim}")
    chosen = np.argsort(probe.entropies, kind="stable")[:n]
    rows = probe.probs[chosen]
    top = np.argsort(-rows, axis=1, kind="stable")[:, :top_k]
    return Posteriorgram(
        probe.mapping,
        chosen,
        probe.entropies[chosen],
        top,
        np.take_along_axis(rows, top, axis=1),
    )
