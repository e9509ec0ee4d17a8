"""Synthetic labeled image datasets, long-tail subsampling and file I/O.

File formats
------------
CSV: one image per row, ``label,p0,p1,...`` with pixels in C x H x W row-major
order. A header row is optional (detected by a non-numeric first field).

Binary: magic ``TGD1``, then u32 N, K, C, H, W (little-endian), then N u32
labels, then N*C*H*W float32 pixels.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataParseError

MAGIC = b"TGD1"


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "all"

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ConfigError(f"images must be N x C x H x W, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ConfigError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index, split: str | None = None) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, images=self.images[index], labels=self.labels[index],
                       split=self.split if split is None else split)


def synth_dataset(num_classes: int, per_class: int, channels: int = 1, height: int = 8,
                  width: int = 8, noise: float = 0.3, seed: int = 0) -> LabeledDataset:
    """Class prototypes plus Gaussian noise, clipped to [0, 1] and rounded to float32 precision."""
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    rng = np.random.default_rng(seed)
    protos = rng.random((num_classes, channels, height, width))
    labels = np.repeat(np.arange(num_classes), per_class)
    images = protos[labels] + noise * rng.standard_normal((labels.size, channels, height, width))
    images = np.clip(images, 0.0, 1.0).astype(np.float32).astype(np.float64)
    order = rng.permutation(labels.size)
    return LabeledDataset(images[order], labels[order], num_classes, "all")


def synth_prototypes(num_classes: int, channels: int = 1, height: int = 8, width: int = 8,
                     seed: int = 0) -> np.ndarray:
    """The prototypes ``synth_dataset`` draws with the same arguments."""
    rng = np.random.default_rng(seed)
    return rng.random((num_classes, channels, height, width))


def stratified_split(ds: LabeledDataset, test_fraction: float = 0.2, seed: int = 0):
    """Per-class shuffled split into (train, test)."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_ix, test_ix = [], []
    for c in range(ds.num_classes):
        ix = np.flatnonzero(ds.labels == c)
        ix = ix[rng.permutation(ix.size)]
        n_test = int(round(ix.size * test_fraction))
        test_ix.append(ix[:n_test])
        train_ix.append(ix[n_test:])
    train = np.sort(np.concatenate(train_ix))
    test = np.sort(np.concatenate(test_ix))
    return ds.subset(train, "train"), ds.subset(test, "test")


def long_tail_counts(n_max: int, num_classes: int, rho: float) -> list[int]:
    """Exponential profile: class c keeps ceil(n_max * rho^(-c/(K-1)))."""
    if rho < 1:
        raise ConfigError(f"imbalance rate must be >= 1, got {rho}")
    out = []
    for c in range(num_classes):
        x = n_max * rho ** (-c / (num_classes - 1))
        # guard against 20.000000000000004 rounding up to 21
        out.append(max(1, math.ceil(x - 1e-9)))
    return out


def long_tail_subsample(ds: LabeledDataset, rho: float, seed: int = 0) -> LabeledDataset:
    """Keep an exponentially decaying, seeded subset of each class; images are untouched."""
    counts = ds.class_counts
    targets = long_tail_counts(int(counts.max()), ds.num_classes, rho)
    if rho == 1:
        return ds
    rng = np.random.default_rng(seed)
    keep = []
    for c, n in enumerate(targets):
        ix = np.flatnonzero(ds.labels == c)
        if ix.size > n:
            ix = np.sort(rng.choice(ix, size=n, replace=False))
        keep.append(ix)
    return ds.subset(np.sort(np.concatenate(keep)))


# -- file I/O --------------------------------------------------------------


def _normalize(pixels: np.ndarray) -> np.ndarray:
    if pixels.size == 0:
        return pixels
    lo, hi = pixels.min(), pixels.max()
    if lo >= 0 and hi <= 1:
        return pixels
    if lo >= 0 and hi <= 255:
        return pixels / 255.0
    return (pixels - lo) / (hi - lo)


def save_dataset(ds: LabeledDataset, path, fmt: str | None = None, header: bool = True) -> None:
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix in (".bin", ".tgd") else "csv")
    n = len(ds)
    c, h, w = ds.shape
    if fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<5I", n, ds.num_classes, c, h, w))
            fh.write(ds.labels.astype("<u4").tobytes())
            fh.write(ds.images.astype("<f4").tobytes())
    elif fmt == "csv":
        flat = ds.images.reshape(n, -1)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            if header:
                wr.writerow(["label"] + [f"p{i}" for i in range(flat.shape[1])])
            for lab, row in zip(ds.labels, flat):
                wr.writerow([int(lab)] + [repr(float(v)) for v in row])
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")


def load_dataset(path, fmt: str | None = None, shape: tuple[int, int, int] | None = None,
                 num_classes: int | None = None, split: str = "all") -> LabeledDataset:
    """Read a CSV or binary dataset; pixel values are normalized to [0, 1].

    For CSV input ``shape`` (C, H, W) defaults to a square single-channel image
    and ``num_classes`` to max(label) + 1.
    """
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix in (".bin", ".tgd") else "csv")
    if fmt == "bin":
        return _load_bin(path, split)
    if fmt != "csv":
        raise ConfigError(f"unknown dataset format {fmt!r}")
    labels, rows, width = [], [], None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if lineno == 1 and not _is_number(rec[0]):
                continue
            try:
                lab = float(rec[0])
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise DataParseError(f"non-numeric field ({exc})", line=lineno) from None
            if lab != int(lab) or lab < 0:
                raise DataParseError(f"label {rec[0]!r} is not a non-negative integer", line=lineno)
            if num_classes is not None and lab >= num_classes:
                raise DataParseError(f"label {int(lab)} is out of range for {num_classes} classes", line=lineno)
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataParseError(f"expected {width} pixels, found {len(vals)}", line=lineno)
            if not all(math.isfinite(v) for v in vals):
                raise DataParseError("non-finite pixel value", line=lineno)
            labels.append(int(lab))
            rows.append(vals)
    if not rows:
        raise DataParseError(f"{path} contains no data rows")
    if not width:
        raise DataParseError("rows carry no pixel values", line=1)
    if shape is None:
        side = math.isqrt(width)
        if side * side != width:
            raise DataParseError(f"cannot infer a square image from {width} pixels; pass shape")
        shape = (1, side, side)
    if math.prod(shape) != width:
        raise DataParseError(f"shape {shape} needs {math.prod(shape)} pixels, rows carry {width}")
    k = num_classes if num_classes is not None else max(labels) + 1
    images = _normalize(np.array(rows, dtype=np.float64)).reshape((len(rows),) + tuple(shape))
    return LabeledDataset(images, np.array(labels), k, split)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _load_bin(path: Path, split: str) -> LabeledDataset:
    raw = path.read_bytes()
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise DataParseError(f"{path} is not a TGD1 dataset file")
    n, k, c, h, w = struct.unpack_from("<5I", raw, 4)
    if n == 0:
        raise DataParseError(f"{path} contains no images")
    off = 24
    need = off + 4 * n + 4 * n * c * h * w
    if len(raw) != need:
        raise DataParseError(f"{path} has {len(raw)} bytes, header implies {need}")
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    if labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise DataParseError(f"image {bad} has label {labels[bad]} outside [0, {k})")
    pix = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off + 4 * n).astype(np.float64)
    if not np.isfinite(pix).all():
        raise DataParseError(f"{path} contains non-finite pixels")
    return LabeledDataset(_normalize(pix).reshape(n, c, h, w), labels, k, split)
