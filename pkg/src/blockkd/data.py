"""Synthetic dataset generation, IDX-like ingestion, and binary checkpoints.

Checkpoint layout (all integers little-endian):
    magic  "BKDC"
    u32    format version (currently 1)
    u32    tensor count
    per tensor:
        u16  name length, then the utf-8 name
        u8   ndim, then ndim * u32 dims
        f64  payload (row-major)
    u64    checksum: sum of every payload byte, mod 2^64

Net metadata (architecture descriptor, spec hash, seed, epoch, frozen flag)
is stored in reserved ``__meta__.*`` tensor entries so the wire format stays
uniform. IDX-like input files carry a big-endian header: u32 magic
0x00000D00 | ndim, then ndim u32 dims, then a u8 payload; pixel tensors are
normalized to [0, 1] on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CompatibilityError, ConfigError, DataError, FormatError
from .nn import CompositeNet, net_from_descriptor

CHECKPOINT_MAGIC = b"BKDC"
CHECKPOINT_VERSION = 1
IDX_TYPE_BYTE = 0x0D


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.samples.shape[0]:
            raise DataError(
                f"{self.samples.shape[0]} samples but labels of shape "
                f"{self.labels.shape}")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be nonnegative")

    def __len__(self) -> int:
        return self.samples.shape[0]


def _balanced_labels(k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n, dtype=np.int64) % k
    rng.shuffle(labels)
    return labels


def _blob_samples(labels, k, rng, noise):
    d = 2 * k
    raw = rng.normal(size=(k, d))
    centroids = 3.0 * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return centroids[labels] + noise * rng.standard_normal((labels.shape[0], d))


def _ring_samples(labels, k, rng, noise):
    angle = rng.uniform(0.0, 2.0 * np.pi, size=labels.shape[0])
    radius = 1.0 + labels + noise * rng.standard_normal(labels.shape[0])
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


_GRID = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")


def _grating(label: int, k: int, phase: float) -> np.ndarray:
    theta = np.pi * label / k
    u = np.cos(theta) * _GRID[0] + np.sin(theta) * _GRID[1]
    chans = [np.sin(2.0 * np.pi * 2.0 * u / 8.0 + phase + c * 2.0 * np.pi / 3.0)
             for c in range(3)]
    return np.stack(chans)


def _tiny_image_samples(labels, k, rng, noise):
    """Class-coded oriented gratings on a 3x8x8 grid.

    Each sample mixes in a little of the next class's pattern and jitters the
    phase and position, so teachers see graded class similarity rather than
    clean one-hot structure.
    """
    n = labels.shape[0]
    out = np.empty((n, 3, 8, 8))
    for row in range(n):
        label = int(labels[row])
        phase = rng.uniform(0.0, 2.0 * np.pi)
        mix = rng.uniform(0.0, 0.3)
        img = (1.0 - mix) * _grating(label, k, phase) \
            + mix * _grating((label + 1) % k, k, phase)
        shift = rng.integers(-1, 2, size=2)
        img = np.roll(img, (int(shift[0]), int(shift[1])), axis=(1, 2))
        out[row] = 0.5 + 0.5 * img + noise * rng.standard_normal((3, 8, 8))
    return out


_KINDS = {"blobs": _blob_samples, "rings": _ring_samples,
          "tiny_images": _tiny_image_samples}


def gen_synthetic(kind: str, k: int, n: int, seed: int, noise: float,
                  test_n: Optional[int] = None) -> tuple[Dataset, Dataset]:
    """Deterministic class-balanced train/test pair of the requested kind."""
    if kind not in _KINDS:
        raise ConfigError(f"unknown synthetic kind '{kind}' "
                          f"(choose from {sorted(_KINDS)})")
    if k < 2 or n < k:
        raise ConfigError(f"need k >= 2 and n >= k, got k={k}, n={n}")
    if test_n is None:
        test_n = max(k, n // 5)
    rng = np.random.default_rng(seed)
    make = _KINDS[kind]
    train_labels = _balanced_labels(k, n, rng)
    train = Dataset(make(train_labels, k, rng, noise), train_labels, split="train")
    test_labels = _balanced_labels(k, test_n, rng)
    test = Dataset(make(test_labels, k, rng, noise), test_labels, split="test")
    return train, test


# ---------------------------------------------------------------------------
# IDX-like binary input


def write_idx(path, array: np.ndarray) -> None:
    """Write a u8 array in the IDX-like layout (fixture generation, tests)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if not 1 <= array.ndim <= 4:
        raise ConfigError(f"IDX arrays must have 1..4 dims, got {array.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", (IDX_TYPE_BYTE << 8) | array.ndim))
        for dim in array.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(array.tobytes())


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic >> 8 != IDX_TYPE_BYTE:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    if not 1 <= ndim <= 4:
        raise FormatError(f"{path}: unsupported ndim {ndim} at byte offset 3")
    offset = 4
    dims = []
    for _ in range(ndim):
        if offset + 4 > len(blob):
            raise FormatError(f"{path}: truncated dims at byte offset {offset}")
        dims.append(struct.unpack_from(">I", blob, offset)[0])
        offset += 4
    count = int(np.prod(dims, dtype=np.int64))
    if offset + count > len(blob):
        raise FormatError(
            f"{path}: payload needs {count} bytes but the file ends at byte "
            f"offset {len(blob)} (payload starts at {offset})")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset)
    return data.reshape(dims).copy()


def load_idx_like(path, labels_path=None, split: str = "train") -> Dataset:
    """Load u8 samples (normalized to [0, 1]); labels come from a companion
    1-d file when given, otherwise they default to zeros."""
    samples = _read_idx(path).astype(np.float64) / 255.0
    if labels_path is not None:
        labels = _read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path}: labels must be 1-d, got {labels.ndim}-d")
        labels = labels.astype(np.int64)
    else:
        labels = np.zeros(samples.shape[0], dtype=np.int64)
    return Dataset(samples, labels, split=split)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointMeta:
    spec_hash: int = 0
    seed: int = 0
    epoch: int = 0
    frozen: bool = False


def _pack_entry(name: str, payload: np.ndarray) -> tuple[bytes, int]:
    raw = np.ascontiguousarray(payload, dtype="<f8")
    name_b = name.encode()
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("B", raw.ndim)
    head += b"".join(struct.pack("<I", d) for d in raw.shape)
    body = raw.tobytes()
    checksum = int(np.frombuffer(body, dtype=np.uint8)
                   .sum(dtype=np.uint64)) if body else 0
    return head + body, checksum


def _meta_entries(net: CompositeNet, meta: CheckpointMeta) -> dict[str, np.ndarray]:
    if net.descriptor is None:
        raise ConfigError("cannot checkpoint a net without a build descriptor")
    desc = net.descriptor.encode()
    padded = desc + b"\x00" * (-len(desc) % 8)
    return {
        "__meta__.spec_hash": np.frombuffer(
            struct.pack("<Q", meta.spec_hash), dtype="<f8").copy(),
        "__meta__.seed": np.asarray(float(meta.seed)),
        "__meta__.epoch": np.asarray(float(meta.epoch)),
        "__meta__.frozen": np.asarray(1.0 if meta.frozen else 0.0),
        "__meta__.arch_len": np.asarray(float(len(desc))),
        "__meta__.arch": np.frombuffer(padded, dtype="<f8").copy(),
    }


def save_checkpoint(net: CompositeNet, path, meta: Optional[CheckpointMeta] = None
                    ) -> None:
    """Write all parameters and running statistics; round trip is bit exact."""
    meta = meta or CheckpointMeta()
    entries = dict(_meta_entries(net, meta))
    entries.update(net.named_state())
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    checksum = 0
    for name in entries:
        packed, part = _pack_entry(name, entries[name])
        blob += packed
        checksum = (checksum + part) % (1 << 64)
    blob += struct.pack("<Q", checksum)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], CheckpointMeta, str]:
    """Parse a checkpoint into raw entries, metadata, and the net descriptor."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CompatibilityError(
            f"{path}: format version {version}, this build reads "
            f"{CHECKPOINT_VERSION}")
    offset = 12
    entries: dict[str, np.ndarray] = {}
    checksum = 0
    for _ in range(count):
        if offset + 2 > len(blob):
            raise FormatError(f"{path}: truncated entry at byte offset {offset}")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode()
        offset += name_len
        if offset + 1 > len(blob):
            raise FormatError(f"{path}: truncated entry at byte offset {offset}")
        ndim = blob[offset]
        offset += 1
        dims = []
        for _ in range(ndim):
            if offset + 4 > len(blob):
                raise FormatError(f"{path}: truncated dims at byte offset {offset}")
            dims.append(struct.unpack_from("<I", blob, offset)[0])
            offset += 4
        numel = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = 8 * numel
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload at byte offset {offset}")
        body = blob[offset:offset + nbytes]
        checksum = (checksum + int(np.frombuffer(body, dtype=np.uint8)
                                   .sum(dtype=np.uint64))) % (1 << 64)
        entries[name] = np.frombuffer(body, dtype="<f8").reshape(dims).copy()
        offset += nbytes
    if offset + 8 > len(blob):
        raise FormatError(f"{path}: missing checksum at byte offset {offset}")
    (stored,) = struct.unpack_from("<Q", blob, offset)
    if stored != checksum:
        raise FormatError(
            f"{path}: integrity check failed (checksum 0x{checksum:016x} != "
            f"stored 0x{stored:016x})")

    required = {"__meta__.spec_hash", "__meta__.seed", "__meta__.epoch",
                "__meta__.frozen", "__meta__.arch", "__meta__.arch_len"}
    if not required <= set(entries):
        raise FormatError(f"{path}: missing metadata entries")
    spec_hash = struct.unpack(
        "<Q", entries.pop("__meta__.spec_hash").tobytes())[0]
    meta = CheckpointMeta(
        spec_hash=spec_hash,
        seed=int(entries.pop("__meta__.seed")),
        epoch=int(entries.pop("__meta__.epoch")),
        frozen=bool(entries.pop("__meta__.frozen")),
    )
    arch_len = int(entries.pop("__meta__.arch_len"))
    descriptor = entries.pop("__meta__.arch").tobytes()[:arch_len].decode()
    return entries, meta, descriptor


def load_checkpoint(path, expect_spec_hash: Optional[int] = None) -> CompositeNet:
    """Rebuild the net from its stored descriptor and load the exact state."""
    entries, meta, descriptor = read_checkpoint(path)
    if expect_spec_hash is not None and meta.spec_hash != expect_spec_hash:
        raise CompatibilityError(
            f"{path}: checkpoint was built for architecture hash "
            f"0x{meta.spec_hash:016x}, expected 0x{expect_spec_hash:016x}")
    net = net_from_descriptor(descriptor)
    net.load_state(entries)
    if meta.frozen:
        net.freeze()
    return net


def load_checkpoint_meta(path) -> CheckpointMeta:
    return read_checkpoint(path)[1]
