"""Datasets, deterministic splits, checkpoints, metrics CSV and PGM output.

Checkpoint layout (little-endian)::

    b"RFL1" | version u32 | entry count u32 |
    per entry: name length u16, UTF-8 name, role u8, trainable u8, rank u8,
               dims u64 * rank, payload float32 * prod(dims)

There is no checksum: a flipped payload byte loads fine.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .models import ROLES, ParameterStore
from .tensor import RngStream

MAGIC = b"RFL1"
VERSION = 1
CSV_HEADER = ("run_id", "stage", "epoch", "split", "metric", "value", "seconds")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InputError(f"{self.name}: images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"{self.name}: labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InputError(f"{self.name}: pixels outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)

    def select_classes(self, classes: Sequence[int], name: str | None = None) -> "Dataset":
        """Keep the listed classes and relabel them 0..k-1 in the given order."""
        classes = list(classes)
        remap = np.full(self.num_classes, -1, dtype=np.int64)
        remap[classes] = np.arange(len(classes))
        keep = np.flatnonzero(np.isin(self.labels, classes))
        return Dataset(self.images[keep], remap[self.labels[keep]], len(classes),
                       name or f"{self.name}[{','.join(map(str, classes))}]")


# -- loaders ---------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic {magic} at offset 0 (expected {expected_magic})")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head != n:
        raise FormatError(f"{path}: payload at offset {head} has {len(raw) - head} bytes, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx", num_classes: int | None = None) -> Dataset:
    """MNIST-family IDX files (magic 2051 for images, 2049 for labels)."""
    images = _read_idx(images_path, 2051)
    labels = _read_idx(labels_path, 2049).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(f"{images_path}: {len(images)} images but {len(labels)} labels")
    images = images.astype(np.float32)[:, None, :, :] / 255.0
    if num_classes is None:
        # MNIST-family files always carry ten classes
        num_classes = max(10, int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(images, labels, num_classes, name)


def write_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    atomic_write(images_path, struct.pack(">IIII", 2051, n, h, w) + images_u8.tobytes())
    atomic_write(labels_path, struct.pack(">II", 2049, n) + np.asarray(labels, dtype=np.uint8).tobytes())


def load_cifar10_bin(paths: Iterable, name: str = "cifar10") -> Dataset:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes."""
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % 3073:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of 3073 "
                              f"(trailing record starts at offset {len(raw) - len(raw) % 3073})")
        if not raw:
            warnings.warn(f"{path}: empty CIFAR-10 batch")
            continue
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        return Dataset(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, np.int64), 10, name)
    return Dataset(np.concatenate(images).astype(np.float32) / 255.0, np.concatenate(labels), 10, name)


def load_digits() -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits (1797 images, 17 grey levels)."""
    from sklearn.datasets import load_digits as _sk_digits

    d = _sk_digits()
    return Dataset(d.images[:, None, :, :].astype(np.float32) / 16.0, d.target, 10, "digits")


# -- splits ----------------------------------------------------------------

@dataclass
class SplitSpec:
    """Per-class counts. A missing train count takes what val/test leave;
    a missing test count takes what train/val leave."""

    train_per_class: int | None = None
    val_per_class: int = 0
    test_per_class: int | None = None
    seed_label: str = "split"


def split(dataset: Dataset, spec: SplitSpec, rng: RngStream) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified, seeded split; each part keeps the original sample order."""
    gen = rng.fresh(spec.seed_label)
    parts: tuple[list, list, list] = ([], [], [])
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        idx = idx[gen.permutation(len(idx))]
        n_val = spec.val_per_class
        n_test, n_train = spec.test_per_class, spec.train_per_class
        if n_train is None:
            n_train = len(idx) - n_val - (n_test or 0)
        if n_test is None:
            n_test = len(idx) - n_train - n_val
        if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test > len(idx):
            raise ConfigError(f"class {c} has {len(idx)} samples; cannot take "
                              f"train {n_train} / val {n_val} / test {n_test}")
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:n_train + n_val + n_test])
    names = ("train", "val", "test")
    return tuple(
        dataset.subset(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64), f"{dataset.name}/{nm}")
        for p, nm in zip(parts, names)
    )


# -- checkpoints -----------------------------------------------------------

def atomic_write(path, payload: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload.encode("utf-8") if isinstance(payload, str) else payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(store: ParameterStore) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(store)))
    warned = False
    for name, p in store.items():
        data = p.tensor.data
        if data.dtype != np.float32:
            if not warned:
                warnings.warn("checkpoint stores float32; down-converting parameters")
                warned = True
            data = data.astype(np.float32)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BBB", ROLES.index(p.role), int(p.trainable), data.ndim))
        buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model_or_store, path) -> None:
    store = getattr(model_or_store, "params", model_or_store)
    atomic_write(path, checkpoint_bytes(store))


def parse_checkpoint(raw: bytes, origin: str = "<bytes>") -> ParameterStore:
    def need(pos, n, what):
        if pos + n > len(raw):
            raise FormatError(f"{origin}: truncated {what} at offset {pos}")

    need(0, 12, "header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{origin}: unknown magic {raw[:4]!r} at offset 0")
    version, count = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"{origin}: unsupported version {version} at offset 4")
    pos = 12
    store = ParameterStore()
    for _ in range(count):
        need(pos, 2, "name length")
        (nlen,) = struct.unpack("<H", raw[pos:pos + 2])
        pos += 2
        need(pos, nlen + 3, "entry header")
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        role, trainable, rank = struct.unpack("<BBB", raw[pos:pos + 3])
        pos += 3
        if role >= len(ROLES):
            raise FormatError(f"{origin}: unknown role code {role} for {name!r} at offset {pos - 3}")
        need(pos, 8 * rank, "dims")
        dims = struct.unpack(f"<{rank}Q", raw[pos:pos + 8 * rank])
        pos += 8 * rank
        nbytes = 4 * int(np.prod(dims))
        need(pos, nbytes, f"payload of {name!r}")
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
        pos += nbytes
        if name in store:
            raise FormatError(f"{origin}: duplicate entry {name!r}")
        store.add(name, data.astype(np.float32), ROLES[role], bool(trainable))
    if pos != len(raw):
        raise FormatError(f"{origin}: {len(raw) - pos} trailing bytes at offset {pos}")
    return store


def load_checkpoint(path) -> ParameterStore:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


# -- metrics CSV -----------------------------------------------------------

@dataclass
class MetricRow:
    stage: str
    epoch: int
    split: str
    metric: str
    value: float
    seconds: float = 0.0


def existing_run_ids(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return list(dict.fromkeys(row["run_id"] for row in csv.DictReader(fh)))


def write_metrics_csv(rows: Iterable[MetricRow], path, run_id: str | None = None,
                      resume: bool = False) -> str:
    """Append ``rows`` under ``run_id`` (a fresh ``run-N`` by default).

    Reusing an existing ``run_id`` is refused so runs never overwrite each
    other, unless ``resume`` is set (a run streaming its own epochs).
    Returns the run id.
    """
    path = Path(path)
    ids = existing_run_ids(path)
    if run_id is None:
        k = len(ids) + 1
        while f"run-{k}" in ids:
            k += 1
        run_id = f"run-{k}"
    elif run_id in ids and not resume:
        raise ConfigError(f"{path}: run id {run_id!r} already present")
    prior = path.read_bytes() if path.exists() else b""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if not prior:
        writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([run_id, r.stage, r.epoch, r.split, r.metric, f"{r.value:.6f}", f"{r.seconds:.6f}"])
    atomic_write(path, prior + out.getvalue().encode("utf-8"))
    return run_id


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise FormatError(f"{path}: header {reader.fieldnames} != {list(CSV_HEADER)}")
        rows = []
        for row in reader:
            row["epoch"] = int(row["epoch"])
            row["value"] = float(row["value"])
            row["seconds"] = float(row["seconds"])
            rows.append(row)
        return rows


# -- images ----------------------------------------------------------------

def pgm_bytes(image_u8: np.ndarray) -> bytes:
    img = np.asarray(image_u8, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(image_u8: np.ndarray, path) -> None:
    atomic_write(path, pgm_bytes(image_u8))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    body = raw[len(raw) - w * h:]
    if maxval != 255 or len(body) != w * h:
        raise FormatError(f"{path}: unsupported PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
