"""On-disk formats.

Binary blobs (PMNN networks, PMFC corpora, PMPS posterior streams) are a
``struct`` header followed by little-endian float64/uint32 buffers. Text
manifests are YAML with sorted keys. Tables go out as CSV or JSON, and each
pipeline stage records xxh64 checksums of what it wrote.
"""

import csv
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import orjson
import xxhash
import yaml

from .config import Activation
from .core_math import RNG_ALGORITHM, NetworkParams
from .errors import ChecksumMismatchError, FormatError, MissingArtifactError

FORMAT_VERSION = 1
MANIFEST_VERSION = "1"

MAGIC_NETWORK = b"PMNN"
MAGIC_CORPUS = b"PMFC"
MAGIC_STREAM = b"PMPS"

# u32 sentinel for labels that have no class.
UNSCORED_U32 = 0xFFFFFFFF

_HEADER = struct.Struct("<4sI")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


# ============================================================================
# Manifests
# ============================================================================

def write_manifest(path: Path, data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": MANIFEST_VERSION, **data}
    path.write_text(yaml.safe_dump(payload, sort_keys=True, default_flow_style=None), encoding="utf-8")
    return path


def read_manifest(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or str(data.get("format_version")) != MANIFEST_VERSION:
        raise FormatError(f"{path}: not a version {MANIFEST_VERSION} manifest")
    return data


def _read_blob(path: Path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    return path.read_bytes()


class _Reader:
    """Sequential little-endian reader over a byte string."""

    def __init__(self, blob: bytes, magic: bytes, source: str = "<bytes>"):
        self.blob = blob
        self.offset = 0
        self.source = source
        found, version = self.unpack(_HEADER)
        if found != magic:
            raise FormatError(f"{source}: bad magic {found!r}, expected {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{source}: unsupported version {version}")

    def unpack(self, fmt: struct.Struct):
        if self.offset + fmt.size > len(self.blob):
            raise FormatError(f"{self.source}: truncated")
        values = fmt.unpack_from(self.blob, self.offset)
        self.offset += fmt.size
        return values

    def u32(self) -> int:
        return self.unpack(_U32)[0]

    def u8(self) -> int:
        return self.unpack(_U8)[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        if self.offset + nbytes > len(self.blob):
            raise FormatError(f"{self.source}: truncated")
        arr = np.frombuffer(self.blob, dtype=dtype, count=count, offset=self.offset)
        self.offset += nbytes
        return arr

    def text(self) -> str:
        length = self.u32()
        return bytes(self.array("u1", length)).decode("utf-8")

    def finish(self):
        if self.offset != len(self.blob):
            raise FormatError(f"{self.source}: {len(self.blob) - self.offset} trailing bytes")


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _u32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<u4").tobytes()


def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


# ============================================================================
# PMNN: network checkpoints
# ============================================================================

def network_to_bytes(net: NetworkParams) -> bytes:
    parts = [_HEADER.pack(MAGIC_NETWORK, FORMAT_VERSION)]
    for w, b in zip(net.weights, net.biases):
        parts.append(_f64(w))
        parts.append(_f64(b))
    return b"".join(parts)


def network_from_bytes(blob: bytes, layer_dims: Sequence[int], activation, source: str = "<bytes>") -> NetworkParams:
    reader = _Reader(blob, MAGIC_NETWORK, source)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(reader.array("<f8", fan_in * fan_out).reshape(fan_in, fan_out).astype(np.float64))
        biases.append(reader.array("<f8", fan_out).astype(np.float64))
    reader.finish()
    return NetworkParams(tuple(layer_dims), weights, biases, Activation(activation))


def save_network(stem: Path, net: NetworkParams, seed: int, meta: Optional[dict] = None) -> list[Path]:
    """Write ``<stem>.pmnn`` and its ``<stem>.yaml`` manifest."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob_path = stem.with_suffix(".pmnn")
    blob_path.write_bytes(network_to_bytes(net))
    manifest = {
        "kind": "network",
        "layer_dims": list(net.layer_dims),
        "activation": net.activation.value,
        "seed": int(seed),
        "rng": RNG_ALGORITHM,
        "meta": meta or {},
    }
    return [write_manifest(stem.with_suffix(".yaml"), manifest), blob_path]


def load_network(stem: Path) -> tuple[NetworkParams, dict]:
    stem = Path(stem)
    manifest = read_manifest(stem.with_suffix(".yaml"))
    blob_path = stem.with_suffix(".pmnn")
    net = network_from_bytes(_read_blob(blob_path), manifest["layer_dims"], manifest["activation"], str(blob_path))
    return net.freeze(), manifest


# ============================================================================
# PMFC: frame corpora
# ============================================================================

def corpus_to_bytes(features: np.ndarray, labels: np.ndarray, boundaries: np.ndarray) -> bytes:
    frames, dim = features.shape
    return b"".join(
        [
            _HEADER.pack(MAGIC_CORPUS, FORMAT_VERSION),
            _U32.pack(frames),
            _U32.pack(dim),
            _f64(features),
            _u32(labels),
            _U32.pack(len(boundaries)),
            _u32(boundaries),
        ]
    )


def corpus_from_bytes(blob: bytes, source: str = "<bytes>"):
    """Return ``(features, labels, boundaries)``."""
    reader = _Reader(blob, MAGIC_CORPUS, source)
    frames, dim = reader.u32(), reader.u32()
    features = reader.array("<f8", frames * dim).reshape(frames, dim).astype(np.float64)
    labels = reader.array("<u4", frames).astype(np.int64)
    boundaries = reader.array("<u4", reader.u32()).astype(np.int64)
    reader.finish()
    return features, labels, boundaries


# ============================================================================
# PMPS: posterior streams
# ============================================================================

def stream_to_bytes(
    probs: np.ndarray,
    labels: np.ndarray,
    label_space_tag: int,
    model_name: str,
    corpus_language: str,
    corpus_fingerprint: str,
) -> bytes:
    frames, dim = probs.shape
    stored = np.where(labels < 0, UNSCORED_U32, labels)
    return b"".join(
        [
            _HEADER.pack(MAGIC_STREAM, FORMAT_VERSION),
            _U32.pack(frames),
            _U32.pack(dim),
            _f64(probs),
            _u32(stored),
            _U8.pack(label_space_tag),
            _text(model_name),
            _text(corpus_language),
            _text(corpus_fingerprint),
        ]
    )


def stream_from_bytes(blob: bytes, source: str = "<bytes>"):
    """Return ``(probs, labels, label_space_tag, model_name, corpus_language, fingerprint)``."""
    reader = _Reader(blob, MAGIC_STREAM, source)
    frames, dim = reader.u32(), reader.u32()
    probs = reader.array("<f8", frames * dim).reshape(frames, dim).astype(np.float64)
    raw = reader.array("<u4", frames).astype(np.int64)
    labels = np.where(raw == UNSCORED_U32, -1, raw)
    tag = reader.u8()
    model_name, corpus_language, fingerprint = reader.text(), reader.text(), reader.text()
    reader.finish()
    return probs, labels, tag, model_name, corpus_language, fingerprint


def read_blob(path: Path) -> bytes:
    return _read_blob(path)


# ============================================================================
# Tables
# ============================================================================

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    options = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
    path.write_bytes(orjson.dumps(payload, option=options) + b"\n")
    return path


def read_json(path: Path):
    return orjson.loads(_read_blob(path))


# ============================================================================
# Checksums
# ============================================================================

def file_checksum(path: Path) -> str:
    digest = xxhash.xxh64()
    with Path(path).open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def checksum_path(out_dir: Path, stage: str) -> Path:
    return Path(out_dir) / f"{stage}.checksums.yaml"


def write_checksums(out_dir: Path, stage: str, paths: Iterable[Path], config_hash: str) -> Path:
    out_dir = Path(out_dir)
    files = {
        Path(p).relative_to(out_dir).as_posix(): file_checksum(p)
        for p in sorted(set(Path(p) for p in paths))
    }
    return write_manifest(
        checksum_path(out_dir, stage),
        {"kind": "checksums", "stage": stage, "config_hash": config_hash, "files": files},
    )


def verify_checksums(out_dir: Path, stage: str) -> dict:
    """Re-hash every file a stage recorded; raise on any difference."""
    out_dir = Path(out_dir)
    record = read_manifest(checksum_path(out_dir, stage))
    bad = []
    for rel, expected in record["files"].items():
        path = out_dir / rel
        if not path.is_file() or file_checksum(path) != expected:
            bad.append(rel)
    if bad:
        raise ChecksumMismatchError(bad)
    return record
