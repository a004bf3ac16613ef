import struct

import numpy as np
import pytest

from posterior_mapping.config import Activation
from posterior_mapping.core_math import NetworkParams
from posterior_mapping.errors import ChecksumMismatchError, FormatError, MissingArtifactError
from posterior_mapping.formats import (
    corpus_from_bytes,
    corpus_to_bytes,
    load_network,
    network_from_bytes,
    network_to_bytes,
    read_csv,
    read_json,
    read_manifest,
    save_network,
    stream_from_bytes,
    stream_to_bytes,
    verify_checksums,
    write_checksums,
    write_csv,
    write_json,
    write_manifest,
)


def test_network_bytes_layout():
    net = NetworkParams.initialize((3, 4, 2), Activation.RELU, seed=7)
    blob = network_to_bytes(net)
    assert blob[:4] == b"PMNN"
    assert struct.unpack_from("<I", blob, 4)[0] == 1
    assert len(blob) == 8 + 8 * net.n_parameters
    restored = network_from_bytes(blob, (3, 4, 2), "relu")
    assert restored.equals(net)


def test_network_bytes_rejects_bad_input():
    net = NetworkParams.initialize((2, 2), seed=0)
    blob = network_to_bytes(net)
    with pytest.raises(FormatError):
        network_from_bytes(b"XXXX" + blob[4:], (2, 2), "tanh")
    with pytest.raises(FormatError):
        network_from_bytes(blob[:-3], (2, 2), "tanh")
    with pytest.raises(FormatError):
        network_from_bytes(blob + b"\x00", (2, 2), "tanh")
    with pytest.raises(FormatError):
        network_from_bytes(blob[:4] + struct.pack("<I", 9) + blob[8:], (2, 2), "tanh")


def test_save_and_load_network(tmp_path):
    net = NetworkParams.initialize((2, 3, 2), seed=1)
    paths = save_network(tmp_path / "nets" / "m", net, seed=1, meta={"name": "m"})
    assert [p.suffix for p in paths] == [".yaml", ".pmnn"]
    loaded, manifest = load_network(tmp_path / "nets" / "m")
    assert loaded.equals(net)
    assert manifest["meta"] == {"name": "m"}
    assert manifest["rng"] == "philox"
    assert manifest["format_version"] == "1"
    with pytest.raises(ValueError):
        loaded.weights[0][0, 0] = 0.0


def test_load_network_missing(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_network(tmp_path / "absent")


def test_corpus_bytes_header_layout(rng):
    features = rng.standard_normal((5, 3))
    labels = np.array([0, 1, 2, 1, 0])
    blob = corpus_to_bytes(features, labels, np.array([0, 3]))
    assert blob[:4] == b"PMFC"
    assert struct.unpack_from("<III", blob, 4) == (1, 5, 3)
    f, l, b = corpus_from_bytes(blob)
    np.testing.assert_array_equal(f, features)
    assert l.tolist() == [0, 1, 2, 1, 0]
    assert b.tolist() == [0, 3]


def test_stream_bytes_keep_unscored_labels(rng):
    probs = rng.dirichlet(np.ones(3), size=4)
    blob = stream_to_bytes(probs, np.array([0, -1, 2, -1]), 0, "A", "A", "abc")
    restored_probs, labels, tag, model, language, fingerprint = stream_from_bytes(blob)
    np.testing.assert_array_equal(restored_probs, probs)
    assert labels.tolist() == [0, -1, 2, -1]
    assert (tag, model, language, fingerprint) == (0, "A", "A", "abc")


def test_stream_bytes_truncated():
    blob = stream_to_bytes(np.full((1, 2), 0.5), np.array([0]), 1, "m", "L", "f")
    with pytest.raises(FormatError):
        stream_from_bytes(blob[:-1])


def test_manifest_requires_version(tmp_path):
    path = write_manifest(tmp_path / "m.yaml", {"kind": "x"})
    assert read_manifest(path)["kind"] == "x"
    other = tmp_path / "old.yaml"
    other.write_text("kind: x\n")
    with pytest.raises(FormatError):
        read_manifest(other)
    with pytest.raises(MissingArtifactError):
        read_manifest(tmp_path / "nothing.yaml")


def test_csv_uses_round_trip_float_text(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["a", "b", "c"], [[0.1, None, np.int64(3)], [1 / 3, "x", 2]])
    text = path.read_text()
    assert text.splitlines()[0] == "a,b,c"
    assert "0.1,,3" in text
    rows = read_csv(path)
    assert float(rows[1]["a"]) == 1 / 3
    assert rows[0]["b"] == ""


def test_json_is_sorted_and_reads_back(tmp_path):
    path = write_json(tmp_path / "x.json", {"b": np.arange(2), "a": 1.5})
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
    assert read_json(path) == {"a": 1.5, "b": [0, 1]}


def test_checksums_detect_changes(tmp_path):
    first = tmp_path / "data" / "one.bin"
    first.parent.mkdir()
    first.write_bytes(b"abc")
    second = tmp_path / "two.bin"
    second.write_bytes(b"xyz")
    write_checksums(tmp_path, "stage", [first, second], "cafe")
    record = verify_checksums(tmp_path, "stage")
    assert sorted(record["files"]) == ["data/one.bin", "two.bin"]
    assert record["config_hash"] == "cafe"

    first.write_bytes(b"abd")
    second.unlink()
    with pytest.raises(ChecksumMismatchError) as info:
        verify_checksums(tmp_path, "stage")
    assert info.value.paths == ["data/one.bin", "two.bin"]


def test_verify_without_record(tmp_path):
    with pytest.raises(MissingArtifactError):
        verify_checksums(tmp_path, "generate")
