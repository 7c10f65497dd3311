"""Datasets (synthetic blobs, IDX files) and metric persistence."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

METRICS_HEADER = ["epoch", "nat_train", "nat_test", "rob_train", "rob_test", "gap", "lambda", "lr", "gnorm_ce", "gnorm_cons"]


@dataclass
class Dataset:
    x: np.ndarray  # [n, d] in [0, 1]
    y: np.ndarray  # [n] class indices
    name: str = ""
    split: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"features {self.x.shape} and labels {self.y.shape} do not pair up")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        if self.y.size and self.y.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.size else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.name, self.split)


def gen_blobs(n_per_class: int, d: int, C: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around seeded centres in [0.2, 0.8]^d, clipped to [0, 1].

    Samples are ordered class by class.
    """
    if C < 2:
        raise ValueError(f"need at least two classes, got {C}")
    if spread <= 0:
        raise ValueError(f"spread must be > 0, got {spread}")
    rng = stream(seed, "data")
    centers = rng.uniform(0.2, 0.8, size=(C, d))
    x = np.concatenate([c + spread * rng.standard_normal((n_per_class, d)) for c in centers])
    y = np.repeat(np.arange(C), n_per_class)
    return Dataset(np.clip(x, 0.0, 1.0), y, name=f"blobs-d{d}-c{C}", split="all")


def blob_splits(n_train_per_class: int, n_test_per_class: int, d: int, C: int, spread: float,
                seed: int) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn from the same blob centres."""
    full = gen_blobs(n_train_per_class + n_test_per_class, d, C, spread, seed)
    per = n_train_per_class + n_test_per_class
    train_idx = np.concatenate([np.arange(c * per, c * per + n_train_per_class) for c in range(C)])
    test_idx = np.concatenate([np.arange(c * per + n_train_per_class, (c + 1) * per) for c in range(C)])
    train, test = full.subset(train_idx), full.subset(test_idx)
    train.split, test.split = "train", "test"
    return train, test


# -- IDX ---------------------------------------------------------------------
class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


def _read_idx(path, magic: int, ndims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    n = math.prod(dims)
    if len(raw) - header < n:
        raise IdxTruncatedError(f"{path}: {len(raw) - header} payload bytes, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path, limit: int | None = None, name: str = "idx", split: str = "") -> Dataset:
    """Read an IDX image/label pair; pixels become features in [0, 1] via /255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), name=name, split=split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for uint8 data shaped [n, rows, cols] and [n]."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# -- metrics -------------------------------------------------------------------
def fmt(v, digits: int | None = 10) -> str:
    if isinstance(v, bool) or v is None:
        return "true" if v is True else "false" if v is False else "null"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        return "null"
    if digits is None:  # shortest text that parses back to the same double
        return repr(v)
    return format(v, f".{digits}g")


def metrics_rows(history) -> list[list[str]]:
    return [
        [fmt(r.epoch), fmt(r.natural_acc_train), fmt(r.natural_acc_test), fmt(r.robust_acc_train),
         fmt(r.robust_acc_test), fmt(r.robust_gap), fmt(r.lambda_t), fmt(r.lr), fmt(r.grad_norm_ce),
         fmt(r.grad_norm_cons)]
        for r in history
    ]


def write_metrics_csv(history, path) -> None:
    if not history:
        raise ValueError("empty history")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(metrics_rows(history))
    Path(path).write_text(buf.getvalue())


def dumps(obj, digits: int | None = 10, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float rendered to ``digits`` significant digits (``None``: exact)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_json_str(str(k))}: {dumps(v, digits, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps(v, digits) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, digits, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, str):
        return _json_str(obj)
    return fmt(obj, digits)


def _json_str(s: str) -> str:
    return json.dumps(s)


def write_metrics_json(result: dict, path) -> None:
    Path(path).write_text(dumps(result) + "\n")
