"""Deterministic toy datasets.

Three families, all flat float64 rows with integer labels:

  * "gaussian_mixture": k isotropic modes equally spaced on a circle; the
    label is the mode index.  Exercises multi-modal generation.
  * "two_moons": the classic interleaved half-circles, two classes.  The
    benchmark for attack and purification experiments.
  * "tiny_bars": 8x8 images (64 features) with one horizontal bar per class,
    eight classes, values in [0, 1].

Same spec (including seed) always yields byte-identical splits; labels are
balanced to within one point per class and the train/test split is
stratified, so both sides stay balanced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

__all__ = ["DATASET_KINDS", "DatasetSpec", "DatasetSplits", "generate_dataset"]

DATASET_KINDS = ("gaussian_mixture", "two_moons", "tiny_bars")

# accepted aliases for the canonical kind names
_KIND_ALIASES = {
    "gaussian_mixture_k": "gaussian_mixture",
    "tiny_bars_8x8": "tiny_bars",
}

_MIXTURE_RADIUS = 4.0
_BARS_SIDE = 8


@dataclass
class DatasetSpec:
    kind: str = "two_moons"
    size: int = 2000
    noise: float = 0.15
    class_count: int = 8
    scale: float = 1.0
    train_fraction: float = 0.8
    seed: int = 0
    # declared value range; None means unbounded (resolved per kind)
    data_range: tuple | None = None

    def canonical_kind(self) -> str:
        return _KIND_ALIASES.get(self.kind, self.kind)

    def resolved_data_range(self) -> tuple | None:
        """Declared range, defaulting to [0, 1] for the image-like kind."""
        if self.data_range is not None:
            return (float(self.data_range[0]), float(self.data_range[1]))
        if self.canonical_kind() == "tiny_bars":
            return (0.0, 1.0)
        return None

    def validate(self) -> None:
        if self.canonical_kind() not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind '{self.kind}'")
        if self.size < 4:
            raise ValueError("dataset size must be at least 4")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.canonical_kind() == "gaussian_mixture" and self.class_count < 2:
            raise ValueError("mixture needs at least two modes")
        if self.data_range is not None:
            lo, hi = self.data_range
            if not float(lo) < float(hi):
                raise ValueError("data_range must be an increasing (low, high) pair")


@dataclass
class DatasetSplits:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def data_dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def class_count(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def _balanced_counts(total: int, classes: int) -> np.ndarray:
    counts = np.full(classes, total // classes, dtype=int)
    counts[: total % classes] += 1
    return counts


def mixture_mode_centers(class_count: int, scale: float = 1.0) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(class_count) / class_count
    return _MIXTURE_RADIUS * scale * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _gaussian_mixture(spec: DatasetSpec, rng: Rng):
    centers = mixture_mode_centers(spec.class_count, spec.scale)
    counts = _balanced_counts(spec.size, spec.class_count)
    rows, labels = [], []
    for c, count in enumerate(counts):
        rows.append(centers[c] + spec.noise * rng.normal((count, 2)))
        labels.append(np.full(count, c, dtype=int))
    return np.concatenate(rows), np.concatenate(labels)


def _two_moons(spec: DatasetSpec, rng: Rng):
    counts = _balanced_counts(spec.size, 2)
    t_outer = np.pi * rng.uniform((counts[0],))
    outer = np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1)
    t_inner = np.pi * rng.uniform((counts[1],))
    inner = np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1)
    x = np.concatenate([outer, inner]) * spec.scale
    x = x + spec.noise * spec.scale * rng.normal(x.shape)
    y = np.concatenate([np.zeros(counts[0], dtype=int), np.ones(counts[1], dtype=int)])
    return x, y


def _tiny_bars(spec: DatasetSpec, rng: Rng):
    classes = _BARS_SIDE
    counts = _balanced_counts(spec.size, classes)
    lo, hi = spec.resolved_data_range()
    rows, labels = [], []
    for c, count in enumerate(counts):
        img = np.zeros((_BARS_SIDE, _BARS_SIDE))
        img[c, :] = 1.0
        flat = np.tile(img.reshape(1, -1), (count, 1))
        flat = np.clip(flat + spec.noise * rng.normal(flat.shape), lo, hi)
        rows.append(flat)
        labels.append(np.full(count, c, dtype=int))
    return np.concatenate(rows), np.concatenate(labels)


def generate_dataset(spec: DatasetSpec) -> DatasetSplits:
    """Generate and split a dataset; fully determined by the spec."""
    spec.validate()
    rng = Rng(spec.seed, stream=401)
    kind = spec.canonical_kind()
    if kind == "gaussian_mixture":
        x, y = _gaussian_mixture(spec, rng)
    elif kind == "two_moons":
        x, y = _two_moons(spec, rng)
    else:
        x, y = _tiny_bars(spec, rng)
    # stratified split keeps both sides balanced; a final shuffle decorrelates
    # row order from class order
    split_rng = Rng(spec.seed, stream=402)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[split_rng.permutation(len(members))]
        cut = int(round(len(members) * spec.train_fraction))
        train_idx.append(members[:cut])
        test_idx.append(members[cut:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    train_idx = train_idx[split_rng.permutation(len(train_idx))]
    test_idx = test_idx[split_rng.permutation(len(test_idx))]
    return DatasetSplits(
        train_x=x[train_idx],
        train_y=y[train_idx],
        test_x=x[test_idx],
        test_y=y[test_idx],
    )
