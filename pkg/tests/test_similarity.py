import itertools

import numpy as np
import pytest

from helpers import build_spec, stream, toy_model
from posterior_mapping.acoustic_model import LabelSpace, TiedStateInventory
from posterior_mapping.core_math import entropy, kl_divergence
from posterior_mapping.errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    FingerprintMismatchError,
    MissingPairError,
)
from posterior_mapping.mapping_network import ProbeResult
from posterior_mapping.similarity import (
    ROW_NAMES,
    SimilarityReport,
    SubsetTag,
    attested_biphones,
    build_cross_class_map,
    entropy_matrix,
    overlap_table,
    partition_biphones,
    samc_confusions,
    samc_correct,
    similarity_matrix,
    subset_report,
)
from posterior_mapping.synthlang import Biphone


def _singletons(name, n):
    return TiedStateInventory(name, tuple((k,) for k in range(n)), n)


# ============================================================================
# Partitions
# ============================================================================

def test_five_phoneme_toy_partition():
    phonemes = ("a", "b", "c", "d", "e")
    target = build_spec("T", phonemes, list(itertools.product(phonemes, phonemes)))
    source = build_spec("S", ("a", "b", "x"), [("a", "a"), ("a", "b"), ("x", "a")])
    partition = partition_biphones(target, source, {Biphone("a", "a")}, _singletons("T", 25))
    tags = dict(zip((b.key for b in target.biphones), partition.tags))
    assert tags.pop("a+a") is SubsetTag.SS
    for key in ("a+b", "b+a", "b+b"):
        assert tags.pop(key) is SubsetTag.SU
    assert set(tags.values()) == {SubsetTag.U}
    assert partition.counts() == {"SS": 1, "SU": 3, "U": 21, "RSS": 1, "RSU": 3, "RU": 21}


def test_partition_is_total(rng):
    phonemes = ("a", "b", "c")
    target = build_spec("T", phonemes, list(itertools.product(phonemes, phonemes)))
    source = build_spec("S", ("a", "b"), [("a", "a"), ("b", "a"), ("b", "b")])
    tying = TiedStateInventory("T", ((0, 1), (2,), (3, 4, 5), (6,), (7,), (8,)), 9)
    partition = partition_biphones(target, source, {Biphone("a", "a"), Biphone("b", "b")}, tying)
    counts = partition.counts()
    assert counts["SS"] + counts["SU"] + counts["U"] == 9
    assert partition.restricted == (False, False, True, False, False, False, True, True, True)
    assert partition.members("RSS") == frozenset()
    assert partition.members("RU") == frozenset({2, 6, 7, 8})


def test_partition_trivial_cases():
    lang = build_spec("A", ("a", "b"), [("a", "a"), ("a", "b"), ("b", "b")])
    same = partition_biphones(lang, lang, set(lang.biphones), _singletons("A", 3))
    assert set(same.tags) == {SubsetTag.SS}
    other = build_spec("B", ("x", "y"), [("x", "y")])
    disjoint = partition_biphones(lang, other, set(other.biphones), _singletons("A", 3))
    assert set(disjoint.tags) == {SubsetTag.U}


def test_partition_errors():
    lang = build_spec("A", ("a", "b"), [("a", "a"), ("a", "b")])
    with pytest.raises(ConfigError):
        partition_biphones(lang, lang, {Biphone("b", "a")}, _singletons("A", 2))
    with pytest.raises(DimensionMismatchError):
        partition_biphones(lang, lang, set(), _singletons("A", 3))


def test_attested_biphones():
    lang = build_spec("A", ("a", "b"), [("a", "a"), ("a", "b"), ("b", "b")])
    assert attested_biphones(lang, np.array([2, 0, 2])) == {Biphone("a", "a"), Biphone("b", "b")}


# ============================================================================
# SAMC
# ============================================================================

@pytest.fixture
def samc_setup():
    target = build_spec("T", ("a", "b", "c"), [("a", "a"), ("a", "b"), ("b", "a"), ("c", "c")])
    source = build_spec("S", ("a", "b"), [("a", "a"), ("a", "b")])
    tying = TiedStateInventory("T", ((0,), (1, 2), (3,)), 4)
    partition = partition_biphones(target, source, set(source.biphones), tying)
    ccm = build_cross_class_map(target, source, toy_model("S", ((0,), (1,)), 2))
    alignment = np.array([0, 0, 1, 1, 2, 3])
    source_probs = [[1, 0], [0.5, 0.5], [0.5, 0.5], [0, 1], [1, 0], [0, 1]]
    source_stream = stream(source_probs, alignment, LabelSpace.BIPHONE, model="S", language="T")
    return partition, ccm, alignment, source_stream


def test_cross_class_map(samc_setup):
    partition, ccm, _, _ = samc_setup
    assert ccm.tolist() == [0, 1, -1, -1]
    assert partition.tags == (SubsetTag.SS, SubsetTag.SS, SubsetTag.SU, SubsetTag.U)


def test_samc_correct_by_hand(samc_setup):
    partition, ccm, alignment, source_stream = samc_setup
    defined, correct = samc_correct(source_stream, partition, alignment, ccm)
    assert defined.tolist() == [True, True, True, True, False, False]
    # frame 1 is a uniform tie resolved to class 0 (right), frame 2 the same tie (wrong)
    assert correct.tolist() == [True, True, False, True, False, False]
    with pytest.raises(DimensionMismatchError):
        samc_correct(source_stream, partition, alignment[:3], ccm)


def test_samc_confusions(samc_setup):
    partition, ccm, alignment, source_stream = samc_setup
    first, second = samc_confusions(source_stream, partition, alignment, ccm)
    assert (first.biphone, first.expected_class, first.frames, first.hit_rate, first.confusions) == (0, 0, 2, 1.0, ())
    assert (second.biphone, second.expected_class, second.hit_rate, second.confusions) == (1, 1, 0.5, ((0, 1),))


# ============================================================================
# Subset reports
# ============================================================================

def test_twenty_frame_report_matches_hand_means(rng, samc_setup):
    partition, ccm, _, _ = samc_setup
    alignment = np.repeat(np.arange(4), 5)
    target_p = rng.dirichlet(np.ones(3), size=20)
    mapped_p = rng.dirichlet(np.ones(3), size=20)
    source_p = rng.dirichlet(np.ones(2), size=20)
    target = stream(target_p, alignment, LabelSpace.BIPHONE, model="T")
    mapped = stream(mapped_p, alignment, LabelSpace.BIPHONE, model="S->T")
    source = stream(source_p, alignment, LabelSpace.BIPHONE, model="S")

    report = subset_report(target, mapped, partition, alignment, source, ccm)
    kl = np.array([kl_divergence(t, m) for t, m in zip(target_p, mapped_p)])
    ent = np.array([entropy(m) for m in mapped_p])

    groups = {"SS": [0, 1], "SU": [2], "U": [3], "RSS": [0], "RSU": [], "RU": [3]}
    for name, members in groups.items():
        mask = np.isin(alignment, members)
        row = report.rows[name]
        assert row.frames == mask.sum()
        if members:
            assert row.mean_kl == pytest.approx(kl[mask].mean(), abs=1e-12)
            assert row.mean_entropy == pytest.approx(ent[mask].mean(), abs=1e-12)
        else:
            assert row.mean_kl is None and row.mean_entropy is None

    hits = np.isin(alignment, [0, 1]) & (np.argmax(source_p, axis=1) == ccm[alignment])
    ss = report.rows["SS"]
    assert ss.pct_correct_samc == pytest.approx(100.0 * hits.sum() / 10)
    if hits.any():
        assert ss.mean_kl_samc == pytest.approx(kl[hits].mean(), abs=1e-12)
    assert report.rows["SU"].pct_correct_samc is None

    assert report.d_x == pytest.approx(kl.mean(), abs=1e-12)
    weighted = sum(report.rows[n].frames * report.rows[n].mean_kl for n in ("SS", "SU", "U")) / 20
    assert report.d_x == pytest.approx(weighted, abs=1e-12)
    assert len(list(report.csv_rows())) == len(ROW_NAMES)
    assert set(report.to_dict()["rows"]) == set(ROW_NAMES)


def test_identical_streams_give_zero_divergence(rng, samc_setup):
    partition, _, _, _ = samc_setup
    alignment = np.repeat(np.arange(4), 2)
    probs = rng.dirichlet(np.ones(3), size=8)
    target = stream(probs, alignment, LabelSpace.BIPHONE)
    report = subset_report(target, stream(probs, alignment, LabelSpace.BIPHONE, model="S->T"), partition, alignment)
    assert report.d_x == 0.0
    assert all(row.mean_kl in (None, 0.0) for row in report.rows.values())


def test_identical_near_one_hot_streams_give_zero_divergence(samc_setup):
    partition, _, _, _ = samc_setup
    alignment = np.array([0, 1, 2, 3])
    probs = np.array(
        [
            [1 - 2e-12, 1e-12, 1e-12],
            [0.98, 0.02 - 1e-13, 1e-13],
            [1e-15, 1 - 2e-15, 1e-15],
            [0.2, 0.3, 0.5],
        ]
    )
    target = stream(probs, alignment, LabelSpace.BIPHONE)
    report = subset_report(target, stream(probs.copy(), alignment, LabelSpace.BIPHONE, model="S->T"), partition, alignment)
    assert report.d_x == 0.0
    assert all(row.mean_kl in (None, 0.0) for row in report.rows.values())


def test_single_subset_report():
    lang = build_spec("A", ("a",), [("a", "a")])
    partition = partition_biphones(lang, lang, set(lang.biphones), _singletons("A", 1))
    probs = np.full((3, 2), 0.5)
    report = subset_report(stream(probs, [0, 0, 0]), stream(probs, [0, 0, 0]), partition, [0, 0, 0])
    populated = {name for name, row in report.rows.items() if row.frames}
    assert populated == {"SS", "RSS"}
    assert report.rows["U"].mean_kl is None


def test_report_errors(samc_setup):
    partition, _, _, _ = samc_setup
    good = stream(np.full((2, 3), 1 / 3), [0, 1])
    with pytest.raises(EmptyInputError):
        subset_report(stream(np.zeros((0, 3)), []), stream(np.zeros((0, 3)), []), partition, [])
    with pytest.raises(FingerprintMismatchError):
        subset_report(good, stream(np.full((2, 3), 1 / 3), [0, 1], fingerprint="other"), partition, [0, 1])
    with pytest.raises(DimensionMismatchError):
        subset_report(good, good, partition, [0])


# ============================================================================
# Matrices
# ============================================================================

def test_similarity_matrix():
    reports = [SimilarityReport("A", "B", 10, 0.3), SimilarityReport("B", "A", 10, 0.7)]
    matrix = similarity_matrix(reports, ("A", "B"))
    assert matrix.values.tolist() == [[0.0, 0.3], [0.7, 0.0]]
    assert matrix["A", "B"] == 0.3
    assert matrix.csv_header() == ["target", "A", "B"]
    assert list(matrix.csv_rows())[1] == ["B", 0.7, 0.0]
    with pytest.raises(MissingPairError) as info:
        similarity_matrix(reports[:1], ("A", "B"))
    assert info.value.pairs == [("B", "A")]


def test_entropy_matrix():
    def probe(entropies):
        entropies = np.asarray(entropies)
        return ProbeResult("x", np.full((len(entropies), 2), 0.5), entropies)

    probes = {("A", "B"): probe([0.1, 0.3, 0.9]), ("B", "A"): probe([0.5])}
    matrix = entropy_matrix(probes, ("A", "B"), n=2)
    assert matrix["A", "B"] == pytest.approx(0.2)
    assert matrix["B", "A"] == pytest.approx(0.5)
    assert np.isnan(matrix.values[0, 0])
    assert list(matrix.csv_rows())[0][1] is None
    assert matrix.to_dict()["B"]["B"] is None
    with pytest.raises(MissingPairError):
        entropy_matrix({("A", "B"): probes[("A", "B")]}, ("A", "B"), n=2)


def test_overlap_table_by_hand():
    first = [f"p{k}" for k in range(10)]
    second = first[:5] + [f"q{k}" for k in range(15)]
    langs = [build_spec(name, ph, [(ph[0], ph[0])]) for name, ph in (("L1", first), ("L2", second))]
    table = overlap_table(langs)
    assert table["L1", "L2"] == 25.0
    assert table["L2", "L1"] == 50.0
    assert table["L1", "L1"] == 100.0
    with pytest.raises(ConfigError):
        overlap_table(langs[:1])
