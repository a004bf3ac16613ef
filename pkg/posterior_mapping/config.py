"""Configuration models.

All tunables are pydantic models. ``ExperimentConfig`` is the top-level
settings object read from YAML; it serializes to a canonical text whose
xxh64 hash fingerprints every artifact a pipeline run writes.
"""

from contextvars import ContextVar
from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Union

import xxhash
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, InitSettingsSource, PydanticBaseSettingsSource, SettingsConfigDict

from .errors import ConfigError

UINT64_MAX = 2**64 - 1

# Settings that do not change an experiment's identity.
_UNHASHED_FIELDS = {"output_dir", "jobs"}

# Parsed YAML of the config file being loaded by ExperimentConfig.from_yaml.
_yaml_values: ContextVar[Optional[dict]] = ContextVar("yaml_values", default=None)


def derive_seed(master: int, *tags) -> int:
    """Derive an independent 64-bit seed for one purpose from a master seed."""
    path = "/".join(str(tag) for tag in tags)
    return xxhash.xxh64_intdigest(path.encode("utf-8"), seed=master & UINT64_MAX)


# ============================================================================
# Core numerics
# ============================================================================

class Activation(str, Enum):
    """Hidden-layer nonlinearity of a feed-forward network."""
    TANH = "tanh"
    RELU = "relu"


class TrainConfig(BaseModel):
    """Mini-batch SGD settings shared by acoustic models and mapping networks."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # 0 is allowed: a zero learning rate must leave parameters untouched.
    learning_rate: float = Field(0.1, ge=0.0)
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(30, ge=1)
    early_stop_patience: int = Field(5, ge=0)
    rng_seed: int = Field(0, ge=0, le=UINT64_MAX)
    l2_penalty: float = Field(0.0, ge=0.0)


class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_dims: tuple[int, ...] = (128,)
    activation: Activation = Activation.TANH

    @field_validator("hidden_dims")
    @classmethod
    def _positive_dims(cls, dims):
        if any(d < 1 for d in dims):
            raise ValueError("hidden layer widths must be positive")
        return dims


# ============================================================================
# Synthetic languages
# ============================================================================

class FamilyConfig(BaseModel):
    """Parameters of a family of synthetic languages.

    ``overlaps`` maps ``"i-j"`` (i < j) to the requested fraction of language
    j's phonemes that language i also has. Pairs left out default to 0.
    ``drift`` and ``phonotactic_drift`` are a scalar for every language or a
    list with one value per language.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    names: tuple[str, ...] = ("A", "B", "C")
    phoneme_counts: Union[int, tuple[int, ...]] = 30
    overlaps: dict[str, float] = Field(
        default_factory=lambda: {"0-1": 0.70, "0-2": 0.70, "1-2": 0.85}
    )
    feature_dim: int = Field(24, ge=1)
    drift: Union[float, tuple[float, ...]] = 0.5
    phonotactic_drift: Optional[Union[float, tuple[float, ...]]] = None
    biphones_per_language: int = Field(300, ge=1)
    phoneme_spread: float = Field(2.0, gt=0.0)
    biphone_jitter: float = Field(0.5, ge=0.0)
    noise_std: float = Field(1.0, gt=0.0)
    mean_segment_frames: int = Field(5, ge=1)
    dirichlet_alpha: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0, le=UINT64_MAX)

    @model_validator(mode="after")
    def _check_shapes(self):
        n = len(self.names)
        if n < 1 or len(set(self.names)) != n:
            raise ValueError("language names must be nonempty and unique")
        for field in ("phoneme_counts", "drift", "phonotactic_drift"):
            value = getattr(self, field)
            if isinstance(value, tuple) and len(value) != n:
                raise ValueError(f"{field} needs one value per language ({n})")
        for key, value in self.overlaps.items():
            i, j = _parse_pair(key)
            if not (0 <= i < j < n):
                raise ValueError(f"overlap key {key!r} must be 'i-j' with i < j < {n}")
            if value < 0:
                raise ValueError(f"overlap {key} must be non-negative")
        return self

    def _per_language(self, value, index: int):
        return value[index] if isinstance(value, tuple) else value

    def phoneme_count(self, index: int) -> int:
        return int(self._per_language(self.phoneme_counts, index))

    def drift_of(self, index: int) -> float:
        return float(self._per_language(self.drift, index))

    def phonotactic_drift_of(self, index: int) -> float:
        if self.phonotactic_drift is None:
            return self.drift_of(index)
        return float(self._per_language(self.phonotactic_drift, index))

    def overlap(self, i: int, j: int) -> float:
        if i > j:
            i, j = j, i
        return float(self.overlaps.get(f"{i}-{j}", 0.0))


def _parse_pair(key: str) -> tuple[int, int]:
    try:
        left, right = key.split("-")
        return int(left), int(right)
    except ValueError as exc:
        raise ValueError(f"overlap key {key!r} must look like '0-1'") from exc


class CorpusSizes(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    train_frames: int = Field(60000, ge=1)
    val_frames: int = Field(2000, ge=1)
    test_frames: int = Field(4000, ge=1)
    segments_per_utterance: int = Field(12, ge=1)

    @property
    def total_frames(self) -> int:
        return self.train_frames + self.val_frames + self.test_frames

    @property
    def fractions(self) -> tuple[float, float, float]:
        total = self.total_frames
        return (self.train_frames / total, self.val_frames / total, self.test_frames / total)


# ============================================================================
# Models
# ============================================================================

class AcousticModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    tying_fraction: float = Field(0.6, gt=0.0, le=1.0)
    min_solo_frames: int = Field(50, ge=0)


class MappingConfig(BaseModel):
    """Mapping-network settings.

    ``hidden_dims`` of None means one hidden layer of
    ``width_factor * max(d_source, d_target)`` units.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_dims: Optional[tuple[int, ...]] = None
    width_factor: int = Field(2, ge=1)
    activation: Activation = Activation.TANH
    log_inputs: bool = False  # experimental
    train: TrainConfig = TrainConfig(learning_rate=0.2, max_epochs=20, early_stop_patience=3)


class FusionSearchConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    grid_step: float = Field(0.1, gt=0.0, le=0.5)


class AnalysisConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    top_n: int = Field(100, ge=1)
    top_k: int = Field(10, ge=1)
    confusion_top: int = Field(3, ge=1)


# ============================================================================
# Experiment
# ============================================================================

class ExperimentConfig(BaseSettings):
    """Declarative description of one full pipeline run.

    Sources, lowest priority first: field defaults, the YAML file,
    ``PMAP_``-prefixed environment variables (nested with ``__``), then
    keyword overrides passed to ``from_yaml``.
    """

    model_config = SettingsConfigDict(env_prefix="PMAP_", env_nested_delimiter="__", extra="forbid")

    config_version: Literal[1] = 1
    seed: int = Field(20240607, ge=0, le=UINT64_MAX)
    family: FamilyConfig = FamilyConfig()
    corpus: CorpusSizes = CorpusSizes()
    acoustic_model: AcousticModelConfig = AcousticModelConfig()
    mapping: MappingConfig = MappingConfig()
    fusion: FusionSearchConfig = FusionSearchConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    output_dir: Path = Path("runs/standard")
    jobs: int = Field(1, ge=1)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        yaml_settings = InitSettingsSource(settings_cls, init_kwargs=_yaml_values.get() or {})
        return init_settings, env_settings, dotenv_settings, yaml_settings, file_secret_settings

    @classmethod
    def from_yaml(cls, path: Optional[Path] = None, **overrides) -> "ExperimentConfig":
        data = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path} must contain a mapping")
        token = _yaml_values.set(data)
        try:
            return cls(**{k: v for k, v in overrides.items() if v is not None})
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
        finally:
            _yaml_values.reset(token)

    def canonical_text(self) -> str:
        payload = self.model_dump(mode="json", exclude=_UNHASHED_FIELDS)
        return yaml.safe_dump(payload, sort_keys=True, default_flow_style=False)

    @property
    def config_hash(self) -> str:
        return xxhash.xxh64_hexdigest(self.canonical_text().encode("utf-8"))

    def seed_for(self, *tags) -> int:
        return derive_seed(self.seed, *tags)
