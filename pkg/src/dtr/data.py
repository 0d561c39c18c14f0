"""Synthetic domain-shift tasks, IDX digit subsets and mini-batch sampling.

Target-domain labels are kept in a :class:`SealedLabels` wrapper. The
trainer only ever reads ``LabeledDataset.labels``, which is ``None`` for
targets; evaluation code opens the seal explicitly through
:func:`dtr.evaluation.eval_labels`.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import SplitMix64

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


class SealedLabels:
    """Evaluation-only labels; deliberately has no public accessor."""

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray):
        self._values = np.asarray(values, dtype=np.int64)

    def __repr__(self) -> str:
        return f"SealedLabels(n={self._values.shape[0]})"

    def __len__(self) -> int:
        return int(self._values.shape[0])


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray | None
    domain: str  # "source" | "target"
    name: str = ""
    seed: int = 0
    n_classes: int = 0
    sealed: SealedLabels | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataFormatError(f"features must be a matrix, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise DataFormatError(f"dataset {self.name!r} has non-finite features")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DataFormatError(f"{self.labels.shape[0]} labels for {self.n} rows")
            if self.n and (self.labels.min() < 0 or (self.n_classes and self.labels.max() >= self.n_classes)):
                raise DataFormatError(f"dataset {self.name!r} has labels outside [0, {self.n_classes})")
        if self.domain not in ("source", "target"):
            raise DataFormatError(f"domain must be 'source' or 'target', got {self.domain!r}")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def without_seal(self) -> "LabeledDataset":
        """Copy with the evaluation labels removed entirely."""
        return LabeledDataset(self.features, self.labels, self.domain, self.name, self.seed, self.n_classes)


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray | None
    domain: str


@dataclass
class ShiftSpec:
    """Base distribution plus the transform applied to produce the target domain.

    ``rotation_deg`` acts on the first two input coordinates; extra input
    dimensions carry isotropic noise of scale ``cluster_std``. A fraction
    ``outlier_fraction`` of each domain is displaced by a random offset of
    norm ``outlier_shift`` along the extra "style" dimensions (or the first
    two if there are none).
    """

    base: str = "gaussian"  # "gaussian" | "moons"
    n_classes: int = 3
    input_dim: int = 2
    radius: float = 3.0
    cluster_std: float = 1.0
    means: list | None = None
    rotation_deg: float = 0.0
    translation: list | None = None
    scale: list | None = None
    class_noise: list | None = None
    outlier_fraction: float = 0.0
    outlier_shift: float = 0.0
    standardize: bool = True

    def validate(self) -> None:
        if self.base not in ("gaussian", "moons"):
            raise ValueError(f"unknown base distribution {self.base!r}")
        if self.base == "moons" and self.n_classes != 2:
            raise ValueError("two-moons requires n_classes == 2")
        if self.n_classes < 2:
            raise ValueError("shift spec needs n_classes >= 2")
        if self.input_dim < 2:
            raise ValueError("shift spec needs input_dim >= 2")
        if not self.cluster_std > 0:
            raise ValueError("degenerate spec: cluster_std must be > 0 (zero variance)")
        if self.means is not None and np.asarray(self.means).shape != (self.n_classes, 2):
            raise ValueError("means must be a K x 2 list")
        for name in ("translation", "scale"):
            v = getattr(self, name)
            if v is not None and len(v) != self.input_dim:
                raise ValueError(f"{name} must have input_dim={self.input_dim} entries")
        if self.scale is not None and any(s == 0 for s in self.scale):
            raise ValueError("degenerate spec: zero axis scale")
        if self.class_noise is not None and len(self.class_noise) != self.n_classes:
            raise ValueError("class_noise needs one entry per class")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        ang = np.pi / 2 + 2 * np.pi * np.arange(self.n_classes) / self.n_classes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _balanced_labels(n: int, K: int, rng: SplitMix64) -> np.ndarray:
    return (np.arange(n) % K)[rng.permutation(n)]


def _draw_base(spec: ShiftSpec, n: int, rng: SplitMix64) -> tuple[np.ndarray, np.ndarray]:
    y = _balanced_labels(n, spec.n_classes, rng)
    noise = rng.normal(n * spec.input_dim).reshape(n, spec.input_dim) * spec.cluster_std
    x = noise
    if spec.base == "gaussian":
        x[:, :2] += spec.class_means()[y]
    else:
        t = rng.uniform(n) * np.pi
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x[:, :2] += spec.radius / 2.0 * np.where(y[:, None] == 0, upper, lower)
    return x, y


def _inject_outliers(x: np.ndarray, spec: ShiftSpec, rng: SplitMix64) -> np.ndarray:
    if not spec.outlier_fraction or not spec.outlier_shift:
        return x
    n, d = x.shape
    k = int(round(spec.outlier_fraction * n))
    idx = rng.permutation(n)[:k]
    cols = np.arange(2, d) if d > 2 else np.arange(2)
    direction = rng.normal(k * len(cols)).reshape(k, len(cols))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True) + 1e-300
    x = x.copy()
    x[np.ix_(idx, cols)] += spec.outlier_shift * direction
    return x


def apply_transform(x: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    out = x.copy()
    if spec.rotation_deg:
        a = math.radians(spec.rotation_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        out[:, :2] = out[:, :2] @ rot.T
    if spec.scale is not None:
        out = out * np.asarray(spec.scale, dtype=np.float64)
    if spec.translation is not None:
        out = out + np.asarray(spec.translation, dtype=np.float64)
    return out


def _standardize(src: np.ndarray, tgt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = src.mean(axis=0)
    sd = src.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (src - mu) / sd, (tgt - mu) / sd


def make_shift_task(spec: ShiftSpec, n_s: int, n_t: int, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Source from the base distribution, target from the transformed one.

    The target's labels are sealed; ``target.labels`` is ``None``.
    """
    spec.validate()
    K = spec.n_classes
    if n_s < K or n_t < K:
        raise ValueError(f"need at least K={K} samples per domain, got n_s={n_s}, n_t={n_t}")
    rng_s = SplitMix64(seed, stream=101)
    rng_t = SplitMix64(seed, stream=202)
    xs, ys = _draw_base(spec, n_s, rng_s)
    xt, yt = _draw_base(spec, n_t, rng_t)
    if spec.class_noise is not None:
        extra = np.asarray(spec.class_noise, dtype=np.float64)[yt]
        xt = xt + rng_t.normal(xt.size).reshape(xt.shape) * extra[:, None]
    xt = apply_transform(xt, spec)
    xs = _inject_outliers(xs, spec, SplitMix64(seed, stream=303))
    xt = _inject_outliers(xt, spec, SplitMix64(seed, stream=404))
    if spec.standardize:
        xs, xt = _standardize(xs, xt)
    name = f"{spec.base}-K{K}-rot{spec.rotation_deg:g}"
    source = LabeledDataset(xs, ys, "source", name + "/source", seed, K)
    target = LabeledDataset(xt, None, "target", name + "/target", seed, K, sealed=SealedLabels(yt))
    return source, target


def make_gaussian_shift(spec: ShiftSpec, n_s: int, n_t: int, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if spec.base != "gaussian":
        raise ValueError("make_gaussian_shift needs base='gaussian'")
    return make_shift_task(spec, n_s, n_t, seed)


def make_two_moons_shift(spec: ShiftSpec, n_s: int, n_t: int, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if spec.base != "moons":
        raise ValueError("make_two_moons_shift needs base='moons'")
    return make_shift_task(spec, n_s, n_t, seed)


def sample_batch(ds: LabeledDataset, size: int, rng: SplitMix64) -> Batch:
    """Uniform sampling with replacement."""
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    if ds.n == 0:
        raise ValueError(f"cannot sample from empty dataset {ds.name!r}")
    idx = rng.integers(ds.n, size)
    labels = ds.labels[idx] if ds.labels is not None else None
    return Batch(ds.features[idx], labels, ds.domain)


# ---------------------------------------------------------------- IDX digits

def _read_idx(path: str | Path, magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at offset 0")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x} at offset 0 (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: truncated payload at offset {len(raw)}; "
                              f"expected {count} bytes after offset {header}")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells over [i, i+1) * n_in / n_out with fractional overlap."""
    a = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            a[i, j] = max(0.0, min(hi, j + 1) - max(lo, j)) / step
    return a


def area_resize(images: np.ndarray, size: int) -> np.ndarray:
    rows = _area_matrix(images.shape[1], size)
    cols = _area_matrix(images.shape[2], size)
    return np.einsum("ij,njk,lk->nil", rows, images, cols)


def load_idx_subset(images_path: str | Path, labels_path: str | Path, per_class: int,
                    resize_to: int = 16, seed: int = 0, domain: str = "source",
                    n_classes: int = 10) -> LabeledDataset:
    dims, pix = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (n_labels,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
    n, h, w = dims
    if n != n_labels:
        raise DataFormatError(f"count mismatch: {n} images vs {n_labels} labels")
    labels = lab.astype(np.int64)
    rng = SplitMix64(seed, stream=505)
    chosen = []
    for c in range(n_classes):
        pool = np.flatnonzero(labels == c)
        if pool.shape[0] < per_class:
            raise DataFormatError(f"class {c} has {pool.shape[0]} images, need {per_class}")
        chosen.append(pool[rng.permutation(pool.shape[0])[:per_class]])
    idx = np.sort(np.concatenate(chosen))
    imgs = pix.reshape(n, h, w)[idx].astype(np.float64) / 255.0
    if (h, w) != (resize_to, resize_to):
        imgs = area_resize(imgs, resize_to)
    feats = np.clip(imgs.reshape(idx.shape[0], -1), 0.0, 1.0)
    name = Path(images_path).name
    if domain == "target":
        return LabeledDataset(feats, None, "target", name, seed, n_classes, sealed=SealedLabels(labels[idx]))
    return LabeledDataset(feats, labels[idx], "source", name, seed, n_classes)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    Path(path).write_bytes(struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes())


def export_csv(path: str | Path, datasets: Sequence[LabeledDataset], include_sealed: bool = False) -> None:
    """Write ``x0..x{d-1},label,domain``; unlabeled rows get an empty label."""
    datasets = list(datasets)
    d = datasets[0].input_dim
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{i}" for i in range(d)] + ["label", "domain"])
        for ds in datasets:
            labels = ds.labels
            if labels is None and include_sealed and ds.sealed is not None:
                labels = ds.sealed._values
            for i in range(ds.n):
                lab = "" if labels is None else int(labels[i])
                wr.writerow([repr(float(v)) for v in ds.features[i]] + [lab, ds.domain])
