from pathlib import Path

import pytest
import yaml

from posterior_mapping.config import (
    ExperimentConfig,
    FamilyConfig,
    MappingConfig,
    TrainConfig,
    derive_seed,
)
from posterior_mapping.errors import ConfigError, DivergenceError, MissingPairError


def test_defaults_describe_the_standard_family():
    cfg = ExperimentConfig()
    assert cfg.family.names == ("A", "B", "C")
    assert cfg.family.phoneme_count(2) == 30
    assert cfg.family.overlap(1, 2) == 0.85
    assert cfg.family.overlap(2, 1) == 0.85
    assert cfg.family.feature_dim == 24
    assert cfg.corpus.total_frames == 66000
    assert sum(cfg.corpus.fractions) == pytest.approx(1.0)


def test_config_hash_is_stable_and_ignores_output_settings():
    a = ExperimentConfig()
    b = ExperimentConfig(output_dir=Path("elsewhere"), jobs=4)
    assert a.config_hash == b.config_hash
    assert a.canonical_text() == b.canonical_text()
    assert ExperimentConfig(seed=1).config_hash != a.config_hash


def test_from_yaml_with_overrides(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump({"config_version": 1, "seed": 3, "family": {"names": ["X", "Y"], "overlaps": {"0-1": 0.5}}}))
    cfg = ExperimentConfig.from_yaml(path, seed=11, output_dir=None)
    assert cfg.seed == 11
    assert cfg.family.names == ("X", "Y")
    assert cfg.family.overlap(0, 1) == 0.5


def test_from_yaml_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [unclosed")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(bad)
    unknown = tmp_path / "unknown.yaml"
    unknown.write_text("colour: blue\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(unknown)
    wrong_version = tmp_path / "v2.yaml"
    wrong_version.write_text("config_version: 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(wrong_version)


def test_environment_fills_unset_values(monkeypatch):
    monkeypatch.setenv("PMAP_SEED", "77")
    assert ExperimentConfig.from_yaml(None).seed == 77


def test_environment_overrides_the_file_and_arguments_override_both(tmp_path, monkeypatch):
    path = tmp_path / "exp.yaml"
    path.write_text(
        yaml.safe_dump({"config_version": 1, "seed": 3, "fusion": {"grid_step": 0.1}, "analysis": {"top_n": 7, "top_k": 2}})
    )
    monkeypatch.setenv("PMAP_SEED", "11")
    monkeypatch.setenv("PMAP_FUSION__GRID_STEP", "0.05")
    monkeypatch.setenv("PMAP_ANALYSIS__TOP_K", "4")
    cfg = ExperimentConfig.from_yaml(path)
    assert cfg.seed == 11
    assert cfg.fusion.grid_step == 0.05
    assert (cfg.analysis.top_n, cfg.analysis.top_k) == (7, 4)
    assert ExperimentConfig.from_yaml(path, seed=12, jobs=None).seed == 12
    monkeypatch.delenv("PMAP_SEED")
    assert ExperimentConfig.from_yaml(path).seed == 3


def test_family_validation():
    with pytest.raises(ValueError):
        FamilyConfig(names=("A", "A"))
    with pytest.raises(ValueError):
        FamilyConfig(names=("A", "B"), overlaps={"0-2": 0.5})
    with pytest.raises(ValueError):
        FamilyConfig(names=("A", "B"), overlaps={"1-0": 0.5})
    with pytest.raises(ValueError):
        FamilyConfig(names=("A", "B"), overlaps={}, drift=(0.1, 0.2, 0.3))


def test_per_language_values():
    family = FamilyConfig(names=("A", "B"), overlaps={"0-1": 0.4}, phoneme_counts=(10, 20), drift=(0.0, 1.0))
    assert family.phoneme_count(1) == 20
    assert family.drift_of(1) == 1.0
    assert family.phonotactic_drift_of(1) == 1.0
    assert FamilyConfig(names=("A", "B"), overlaps={}, phonotactic_drift=0.0).phonotactic_drift_of(0) == 0.0


def test_train_config_bounds():
    assert TrainConfig(learning_rate=0.0).learning_rate == 0.0
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_mapping_defaults():
    cfg = MappingConfig()
    assert cfg.hidden_dims is None
    assert cfg.width_factor == 2
    assert not cfg.log_inputs


def test_derive_seed():
    assert derive_seed(1, "am", "A") == derive_seed(1, "am", "A")
    assert derive_seed(1, "am", "A") != derive_seed(1, "am", "B")
    assert derive_seed(1, "am", "A") != derive_seed(2, "am", "A")
    assert ExperimentConfig(seed=5).seed_for("x") == derive_seed(5, "x")


def test_error_exit_codes():
    assert ConfigError("x").exit_code == 2
    assert DivergenceError(3, float("nan")).exit_code == 4
    err = MissingPairError([("B", "A"), ("A", "B")])
    assert err.exit_code == 3
    assert "A<-B" in str(err) and "B<-A" in str(err)
