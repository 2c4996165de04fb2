"""Datasets: synthetic human-machine tasks, CSV ingestion, splitting.

Every instance carries features x, a ground-truth label y and one logged
human response h, fixed at dataset creation. The synthetic generator
plants complementarity structure: a human-hard region (high x[0]) where
the logged response is unreliable, and a disjoint machine-hard region
(low x[0]) where half the features are corrupted but the human stays
accurate.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ParseError

SIMPLEX_SCALE = 2.0  # distance of class means from the origin, in sigmas


@dataclass
class Instance:
    x: np.ndarray
    y: int
    h: int


@dataclass
class Dataset:
    """Feature matrix plus aligned label and human-response vectors."""

    X: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) int labels in [0, K)
    h: np.ndarray  # (n,) int human responses in [0, K)
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.h = np.asarray(self.h, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) == 0:
            raise InputError("dataset must be a nonempty (n, d) matrix")
        if not np.isfinite(self.X).all():
            raise InputError("non-finite feature values")
        if len(self.y) != len(self.X) or len(self.h) != len(self.X):
            raise InputError("X, y, h lengths differ")
        if self.num_classes < 2:
            raise InputError("need at least two classes")
        for arr, what in ((self.y, "label"), (self.h, "human response")):
            if arr.min() < 0 or arr.max() >= self.num_classes:
                raise InputError(f"{what} out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def instance(self, i: int) -> Instance:
        return Instance(self.X[i], int(self.y[i]), int(self.h[i]))

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.h[idx],
                       self.num_classes, name or self.name)

    def human_error_rate(self) -> float:
        return float((self.h != self.y).mean())


@dataclass
class SynthConfig:
    """Knobs for the planted-complementarity generator.

    Defaults mirror a skewed five-class task at desk scale: one dominant
    class, a small human-hard region with heavy response noise, and a
    machine-hard region with corrupted features.
    """

    num_classes: int = 5
    feature_dim: int = 8
    n: int = 14000
    class_priors: tuple[float, ...] = (0.7, 0.075, 0.075, 0.075, 0.075)
    human_easy_error: float = 0.05
    human_hard_error: float = 0.5
    hard_region_fraction: float = 0.1
    machine_noise_scale: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        priors = np.asarray(self.class_priors, dtype=np.float64)
        if len(priors) != self.num_classes or (priors < 0).any() \
                or abs(priors.sum() - 1.0) > 1e-9:
            raise ConfigError("class_priors must be a distribution over K classes")
        if self.num_classes < 2 or self.feature_dim < 1 or self.n < 1:
            raise ConfigError("need K >= 2, d >= 1, n >= 1")
        if not (0.0 <= self.human_easy_error <= 1.0
                and 0.0 <= self.human_hard_error <= 1.0):
            raise ConfigError("error rates must be in [0, 1]")
        if self.human_hard_error < self.human_easy_error:
            raise ConfigError("human_hard_error must be >= human_easy_error")
        if not 0.0 < self.hard_region_fraction < 1.0:
            raise ConfigError("hard_region_fraction must be in (0, 1)")
        if self.machine_noise_scale < 0:
            raise ConfigError("machine_noise_scale must be non-negative")


def class_means(num_classes: int, feature_dim: int) -> np.ndarray:
    """Class means on a scaled simplex, kept out of the x[0] coordinate.

    Coordinate 0 is reserved as the region (human-hardness) axis, so means
    occupy coordinates 1..d-1, wrapping with growing magnitude if K
    exceeds d-1. With d == 1 every class shares the origin.
    """
    means = np.zeros((num_classes, feature_dim))
    if feature_dim < 2:
        return means
    span = feature_dim - 1
    for k in range(num_classes):
        coord = 1 + (k % span)
        means[k, coord] += SIMPLEX_SCALE * (1.0 + k // span)
    return means


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Sample a dataset with planted human-hard and machine-hard regions.

    Labels follow `class_priors`; features are unit-variance Gaussians
    around the class means. Instances whose x[0] lies above the
    (1 - hard_region_fraction) quantile form the human-hard region: there
    the response flips to the most confusable wrong class (the nearest
    other class mean) with probability `human_hard_error`; elsewhere it
    flips with probability `human_easy_error`. Instances below the
    `hard_region_fraction` quantile form the machine-hard region, where
    features 1..ceil(d/2) are corrupted with Gaussian noise of scale
    `machine_noise_scale`. The planted x[0] boundaries are recorded in the
    dataset name.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    K, d, n = cfg.num_classes, cfg.feature_dim, cfg.n

    y = rng.choice(K, size=n, p=np.asarray(cfg.class_priors))
    means = class_means(K, d)
    X = means[y] + rng.standard_normal((n, d))

    x0 = X[:, 0]
    hard_hi = float(np.quantile(x0, 1.0 - cfg.hard_region_fraction))
    hard_lo = float(np.quantile(x0, cfg.hard_region_fraction))
    human_hard = x0 > hard_hi
    machine_hard = x0 < hard_lo

    # Confusable flip target: nearest class mean other than the true class.
    dists = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    dists[np.arange(n), y] = np.inf
    confusable = dists.argmin(axis=1)

    err_prob = np.where(human_hard, cfg.human_hard_error, cfg.human_easy_error)
    flips = rng.random(n) < err_prob
    h = np.where(flips, confusable, y)

    corrupt_hi = min((d + 1) // 2, d - 1)  # features 1..ceil(d/2), capped at d-1
    if corrupt_hi >= 1 and machine_hard.any():
        noise = rng.standard_normal((int(machine_hard.sum()), corrupt_hi))
        X[np.ix_(machine_hard, np.arange(1, corrupt_hi + 1))] += \
            cfg.machine_noise_scale * noise

    name = (f"synth[k={K},d={d},n={n},seed={cfg.seed},"
            f"hard_hi={hard_hi!r},hard_lo={hard_lo!r}]")
    return Dataset(X, y, h, K, name)


_BOUNDARY_RE = re.compile(r"hard_hi=([^,]+),hard_lo=([^\]]+)\]")


def planted_boundaries(dataset: Dataset) -> tuple[float, float] | None:
    """Recover (hard_hi, hard_lo) x[0] thresholds from a synthetic name."""
    m = _BOUNDARY_RE.search(dataset.name)
    if not m:
        return None
    return float(m.group(1)), float(m.group(2))


def split(dataset: Dataset, fractions: tuple[float, float, float],
          seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle into (train, val, test); remainder goes to train."""
    fracs = np.asarray(fractions, dtype=np.float64)
    if len(fracs) != 3 or (fracs <= 0).any() or abs(fracs.sum() - 1.0) > 1e-9:
        raise ConfigError("fractions must be three positives summing to 1")
    n = len(dataset)
    if n < 3:
        raise InputError(f"cannot split {n} instances three ways")
    n_val = int(np.floor(n * fracs[1]))
    n_test = int(np.floor(n * fracs[2]))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val],
             perm[n_train + n_val:])
    tags = ("train", "val", "test")
    return tuple(dataset.subset(p, f"{dataset.name}/{t}")
                 for p, t in zip(parts, tags))


def save_csv(dataset: Dataset, path) -> None:
    """Write the package CSV format: header f0..f{d-1},y,h then one row each."""
    d = dataset.feature_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(d)] + ["y", "h"])
        for xi, yi, hi in zip(dataset.X, dataset.y, dataset.h):
            writer.writerow([repr(float(v)) for v in xi] + [int(yi), int(hi)])


def load_csv(path, num_classes: int) -> Dataset:
    """Parse the package CSV format; errors carry the 1-based line number."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file", line=1)
    header = rows[0]
    if len(header) < 3 or header[-2:] != ["y", "h"]:
        raise ParseError(f"{path}: header must end with y,h columns", line=1)
    d = len(header) - 2
    if header[:d] != [f"f{i}" for i in range(d)]:
        raise ParseError(f"{path}: feature columns must be f0..f{d - 1}", line=1)

    X = np.empty((len(rows) - 1, d))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    h = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != d + 2:
            raise ParseError(f"{path}:{lineno}: expected {d + 2} columns,"
                             f" got {len(row)}", line=lineno)
        try:
            X[i] = [float(v) for v in row[:d]]
            y[i], h[i] = int(row[d]), int(row[d + 1])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}", line=lineno) from e
        if not np.isfinite(X[i]).all():
            raise ParseError(f"{path}:{lineno}: non-finite feature", line=lineno)
        for col, val in (("y", y[i]), ("h", h[i])):
            if not 0 <= val < num_classes:
                raise ParseError(f"{path}:{lineno}: {col}={val} outside"
                                 f" [0, {num_classes})", line=lineno)
    return Dataset(X, y, h, num_classes, name=str(path))
