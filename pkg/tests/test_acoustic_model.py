import numpy as np
import pytest

from helpers import build_spec, corpus_from_labels, toy_model
from posterior_mapping.acoustic_model import (
    AcousticModel,
    LabelSpace,
    PosteriorStream,
    TiedStateInventory,
    build_monolingual,
    error_rates,
    per_class_error_delta,
    pooled_name,
    pooled_units,
    posteriors,
    tie_states,
    train_pooled_model,
)
from posterior_mapping.config import AcousticModelConfig, NetworkConfig, TrainConfig
from posterior_mapping.errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    FormatError,
)
from posterior_mapping.formats import stream_to_bytes
from posterior_mapping.synthlang import FrameCorpus, concat_corpora, sample_corpus

SEPARATED_MEANS = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]]


@pytest.fixture(scope="module")
def separated():
    lang = build_spec("A", ("a", "b", "c"), [("a", "a"), ("a", "b"), ("b", "c")], means=SEPARATED_MEANS)
    return lang, sample_corpus(lang, 3000, seed=1), sample_corpus(lang, 600, seed=2)


@pytest.fixture(scope="module")
def small_cfg():
    return AcousticModelConfig(
        network=NetworkConfig(hidden_dims=(8,)),
        train=TrainConfig(learning_rate=0.2, max_epochs=10, batch_size=32, rng_seed=3),
        tying_fraction=1.0,
    )


# ============================================================================
# Tying
# ============================================================================

def test_tying_merges_nearest_units_first():
    means = np.array([[0.0, 0.0], [0.0, 1.0], [3.0, 0.0], [3.0, 1.0]])
    corpus = corpus_from_labels("A", np.repeat(np.arange(4), 10), means)
    tying = tie_states(corpus, 2, min_solo_frames=0)
    assert tying.clusters == ((0, 1), (2, 3))
    assert tying.restricted == (False, False)
    assert tie_states(corpus, 1, min_solo_frames=0).clusters == ((0, 1, 2, 3),)
    assert tie_states(corpus, 4).clusters == ((0,), (1,), (2,), (3,))


def test_tying_protects_well_populated_singletons():
    # 0 and 3 are nearest, but 0 is protected and the sparse pair (2, 3) can still merge
    means = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0], [0.5, 0.0]])
    labels = np.concatenate([np.zeros(100, int), np.ones(100, int), np.full(2, 2), np.full(2, 3)])
    corpus = corpus_from_labels("A", labels, means)
    tying = tie_states(corpus, 3, min_solo_frames=50)
    assert tying.clusters == ((0,), (1,), (2, 3))
    assert tying.restricted == (True, True, False)
    assert tie_states(corpus, 3, min_solo_frames=1000).clusters == ((0, 3), (1,), (2,))


def test_tying_merges_protected_units_only_when_nothing_else_can():
    means = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]])
    labels = np.concatenate([np.zeros(100, int), np.ones(100, int), np.full(2, 2)])
    corpus = corpus_from_labels("A", labels, means)
    assert tie_states(corpus, 2, min_solo_frames=50).clusters == ((0, 1), (2,))
    assert tie_states(corpus, 2, min_solo_frames=1000).clusters == ((0, 1), (2,))


def test_tying_leaves_unattested_units_without_class():
    means = np.array([[0.0, 0.0], [1.0, 0.0], [9.0, 9.0]])
    corpus = corpus_from_labels("A", [0, 0, 1, 1], means)
    tying = tie_states(corpus, 2, n_units=3)
    assert tying.attested == frozenset({0, 1})
    assert tying.class_of_unit.tolist() == [0, 1, -1]
    assert tying.restricted_units() == frozenset({0, 1})


def test_tying_errors():
    corpus = corpus_from_labels("A", [0, 1], np.eye(2))
    with pytest.raises(ConfigError):
        tie_states(corpus, 3)
    with pytest.raises(ConfigError):
        tie_states(corpus, 0)
    with pytest.raises(EmptyInputError):
        tie_states(FrameCorpus("A", np.zeros((0, 2)), np.zeros(0), []), 1, n_units=2)


def test_inventory_validation():
    with pytest.raises(ConfigError):
        TiedStateInventory("A", ((0, 1), (1,)), 2)
    with pytest.raises(ConfigError):
        TiedStateInventory("A", ((0, 3),), 2)
    tying = TiedStateInventory("A", ((1, 0),), 2)
    assert tying.clusters == ((0, 1),)
    with pytest.raises(DimensionMismatchError):
        tying.translate([2])


def test_error_rates():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    tied, lenient = error_rates(probs, np.array([0, 0, -1]))
    assert tied == 0.5
    assert lenient == pytest.approx(2 / 3)
    assert error_rates(probs, np.array([-1, -1, -1]))[0] is None
    with pytest.raises(EmptyInputError):
        error_rates(np.zeros((0, 2)), np.zeros(0, int))


# ============================================================================
# Training and posteriors
# ============================================================================

def test_well_separated_language_is_learned(separated, small_cfg):
    lang, train, val = separated
    model = build_monolingual(lang, train, val, small_cfg)
    assert model.class_count == 3
    assert model.units == ("a+a", "a+b", "b+c")
    assert model.train_meta["val_frame_error"] < 0.05
    assert model.error_on(val)[0] < 0.05


def test_training_is_deterministic(separated, small_cfg):
    lang, train, val = separated
    first = build_monolingual(lang, train, val, small_cfg)
    second = build_monolingual(lang, train, val, small_cfg)
    assert first.net.equals(second.net)
    assert first.train_meta == second.train_meta


def test_posteriors_label_spaces(separated):
    lang, _, val = separated
    model = toy_model("A", ((0,), (1, 2)), 3)
    own = posteriors(model, val)
    assert own.label_space == LabelSpace.TIED_CLASS
    assert own.corpus_fingerprint == val.fingerprint
    np.testing.assert_allclose(own.probs.sum(axis=1), 1.0)
    assert set(own.labels.tolist()) <= {0, 1}

    foreign = FrameCorpus("B", val.features, val.labels, val.utterance_boundaries)
    other = posteriors(model, foreign)
    assert other.label_space == LabelSpace.BIPHONE
    assert np.array_equal(other.labels, val.labels)

    with pytest.raises(DimensionMismatchError):
        posteriors(toy_model("A", ((0,), (1, 2)), 3, dim=5), val)


def test_model_save_and_load(tmp_path, separated, small_cfg):
    lang, train, val = separated
    model = build_monolingual(lang, train, val, small_cfg)
    paths = model.save(tmp_path / "am" / "A")
    assert all(p.is_file() for p in paths)
    loaded = AcousticModel.load(tmp_path / "am" / "A")
    assert loaded.net.equals(model.net)
    assert loaded.tying == model.tying
    assert loaded.units == model.units
    assert loaded.train_meta == model.train_meta
    np.testing.assert_array_equal(loaded.label_maps["A"], model.label_maps["A"])


def test_stream_round_trip(tmp_path):
    stream = PosteriorStream(np.full((2, 2), 0.5), [1, -1], LabelSpace.TIED_CLASS, "A", "A", "beef")
    restored = PosteriorStream.load(stream.save(tmp_path / "s.pmps"))
    assert restored.labels.tolist() == [1, -1]
    assert restored.label_space == LabelSpace.TIED_CLASS
    with pytest.raises(FormatError):
        PosteriorStream.from_bytes(stream_to_bytes(np.full((1, 2), 0.5), np.array([0]), 7, "A", "A", "x"))


# ============================================================================
# Pooling
# ============================================================================

def test_pooled_units_unify_shared_phonemes():
    a = build_spec("A", ("a", "b", "c"), [("a", "b"), ("b", "c")])
    b = build_spec("B", ("a", "b", "d"), [("a", "b"), ("d", "a")])
    units, maps = pooled_units([a, b])
    assert units == ("a+b", "A:b+c", "B:d+a")
    assert maps["A"].tolist() == [0, 1]
    assert maps["B"].tolist() == [0, 2]
    assert pooled_name(["A", "B", "A"]) == "pool-A+B"


def test_pooling_a_language_with_itself_matches_doubled_data(separated, small_cfg):
    lang, train, val = separated
    pooled = train_pooled_model([lang, lang], [train, train], [val], small_cfg)
    assert pooled.name == "pool-A"
    assert pooled.label_maps["A"].tolist() == [0, 1, 2]
    doubled = tie_states(concat_corpora([train, train], "A"), 3, small_cfg.min_solo_frames, 3)
    assert pooled.tying.clusters == doubled.clusters


def test_pooled_model_needs_two_corpora(separated):
    lang, train, _ = separated
    with pytest.raises(ConfigError):
        train_pooled_model([lang], [train])


def test_per_phoneme_degradation():
    lang = build_spec("A", ("a", "b", "c"), [("a", "a"), ("a", "b")])
    test = corpus_from_labels("A", [0, 0, 1, 1, 1, 1], np.eye(2), frames_per_utterance=2)
    mono = toy_model("A", ((0,), (1,)), 2)
    pooled = toy_model("pool-A+B", ((0, 1),), 2, label_maps={"A": np.arange(2)})
    table = per_class_error_delta(mono, pooled, test, lang)
    rows = {r.phoneme: r for r in table.rows}
    assert table.excluded == ["c"]
    assert rows["a"].frames == 2 and rows["a"].delta_points == 0.0
    assert rows["a"].relative_change is None
    assert rows["b"].mono_error == 1.0 and rows["b"].pooled_error == 0.0
    assert rows["b"].delta_points == -100.0
    assert rows["b"].relative_change == -1.0
    assert table.mean_delta_points == -50.0


def test_degradation_against_same_model_is_zero(separated):
    lang, _, val = separated
    model = toy_model("A", ((0,), (1,), (2,)), 3)
    table = per_class_error_delta(model, model, val, lang, shared=["a", "b", "zz"])
    assert table.excluded == ["zz"]
    assert all(r.delta_points == 0.0 for r in table.rows)
