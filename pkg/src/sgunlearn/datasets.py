"""Synthetic data, CSV ingestion, splitting and forget/retain partitioning."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError

SPLITS = ("train", "val", "test_audit", "test_eval")
SPLIT_FRACTIONS = (0.60, 0.10, 0.15, 0.15)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # per-row tag from SPLITS
    seed: int = 0
    n_classes: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        s = np.asarray(self.split, dtype=object)
        if x.ndim != 2 or y.shape != (x.shape[0],) or s.shape != (x.shape[0],):
            raise ContractError("features must be n x d with one label and split tag per row")
        if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("labels must be integers")
        y = y.astype(np.int64)
        if y.size and y.min() < 0:
            raise ContractError("labels must be non-negative")
        unknown = set(s.tolist()) - set(SPLITS)
        if unknown:
            raise ContractError(f"unknown split tag(s): {sorted(unknown)}")
        k = self.n_classes or (int(y.max()) + 1 if y.size else 0)
        if y.size and y.max() >= k:
            raise ContractError("label outside [0, n_classes)")
        for arr in (x, y, s):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "split", s)
        object.__setattr__(self, "n_classes", k)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    def rows(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.intp)
        return self.features[idx], self.labels[idx]

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.split, other.split)
                and self.n_classes == other.n_classes)


@dataclass(frozen=True, eq=False)
class ForgetPartition:
    """Forget rows of the train split, as absolute row indices into the bundle."""

    forget_indices: np.ndarray
    retain_indices: np.ndarray
    mode: str
    ratio: float | None = None
    forget_class: int | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def excluded_class(self) -> int | None:
        """The class removed from evaluation populations in class-wise mode."""
        return self.forget_class if self.mode == "classwise" else None

    def __eq__(self, other):
        if not isinstance(other, ForgetPartition):
            return NotImplemented
        return (np.array_equal(self.forget_indices, other.forget_indices)
                and np.array_equal(self.retain_indices, other.retain_indices)
                and self.mode == other.mode)


def _unit_directions(k: int, d: int) -> np.ndarray:
    # regular simplex (pairwise equiangular) when it fits, otherwise a circle
    if k <= d:
        u = np.eye(k) - 1.0 / k
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        out = np.zeros((k, d))
        out[:, :k] = u
        return out
    angles = 2.0 * np.pi * np.arange(k) / k
    out = np.zeros((k, d))
    out[:, 0] = np.cos(angles)
    out[:, 1] = np.sin(angles)
    return out


def _split_counts(n: int) -> list[int]:
    counts = [int(round(f * n)) for f in SPLIT_FRACTIONS[:-1]]
    counts.append(n - sum(counts))
    if counts[-1] < 0:
        counts[-2] += counts[-1]
        counts[-1] = 0
    return counts


def gen_gaussian_mixture(n_classes: int, n_per_class: int, dim: int,
                         separation: float, seed: int) -> DatasetBundle:
    """Isotropic unit-variance Gaussian classes centred at ``separation * u_k``.

    Rows are split per class 60/10/15/15 into train/val/test_audit/test_eval,
    so every split is stratified.
    """
    if n_classes < 2 or dim < 2 or n_per_class < 1:
        raise ContractError("need n_classes >= 2, dim >= 2, n_per_class >= 1")
    if not separation >= 0:
        raise ContractError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    centres = separation * _unit_directions(n_classes, dim)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centres[labels] + rng.standard_normal((labels.size, dim))
    split = np.empty(labels.size, dtype=object)
    counts = _split_counts(n_per_class)
    for k in range(n_classes):
        rows = np.flatnonzero(labels == k)
        rng.shuffle(rows)
        start = 0
        for tag, c in zip(SPLITS, counts):
            split[rows[start:start + c]] = tag
            start += c
    return DatasetBundle(features, labels, split, seed=seed, n_classes=n_classes)


def split_forget(bundle: DatasetBundle, mode: str = "random", seed: int = 0, *,
                 ratio: float = 0.1, forget_class: int | None = None) -> ForgetPartition:
    """Partition the train split into forget and retain rows.

    ``random`` samples ``round(ratio * n_train)`` rows uniformly without
    replacement; ``classwise`` forgets every train row of ``forget_class``.
    """
    train = bundle.indices("train")
    if mode == "random":
        if not 0.0 < ratio < 1.0:
            raise ContractError("random forgetting needs ratio in (0, 1)")
        n_forget = int(round(ratio * train.size))
        rng = np.random.default_rng(seed)
        forget = np.sort(rng.choice(train, size=n_forget, replace=False)) if n_forget else train[:0]
        forget_class = None
    elif mode == "classwise":
        if forget_class is None or not 0 <= forget_class < bundle.n_classes:
            raise ContractError("classwise forgetting needs a class in [0, K)")
        forget = train[bundle.labels[train] == forget_class]
        ratio = None
    else:
        raise ContractError(f"unknown forget mode {mode!r}")
    if forget.size == 0:
        raise ContractError("forget set is empty")
    retain = np.setdiff1d(train, forget, assume_unique=True)
    return ForgetPartition(forget, retain, mode, ratio=ratio, forget_class=forget_class, seed=seed)


def save_csv(bundle: DatasetBundle, path) -> None:
    d = bundle.n_features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(d)] + ["label", "split"])
        for x, y, s in zip(bundle.features, bundle.labels, bundle.split):
            w.writerow([repr(float(v)) for v in x] + [int(y), s])


def load_csv(path, seed: int = 0) -> DatasetBundle:
    """Read a bundle written by :func:`save_csv` (header ``f0..f{d-1},label,split``)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        d = len(header) - 2
        expected = [f"f{j}" for j in range(d)] + ["label", "split"]
        if d < 1 or header != expected:
            raise ParseError(f"bad header {header!r}; expected f0..f{{d-1}},label,split", line=1)
        feats, labels, split = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise ParseError(f"expected {d + 2} fields, got {len(row)}", line=lineno)
            try:
                feats.append([float(v) for v in row[:d]])
                lab = float(row[d])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if lab != int(lab):
                raise ParseError(f"non-integral label {row[d]!r}", line=lineno)
            if row[d + 1] not in SPLITS:
                raise ContractError(f"line {lineno}: unknown split tag {row[d + 1]!r}")
            labels.append(int(lab))
            split.append(row[d + 1])
    if not feats:
        raise ParseError("no data rows", line=2)
    return DatasetBundle(np.array(feats), np.array(labels), np.array(split, dtype=object), seed=seed)
