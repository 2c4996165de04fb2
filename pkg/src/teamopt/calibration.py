"""Platt sigmoid calibration and calibration-quality measurement.

Binary fits follow Platt's recipe: a sigmoid sigma(a*s + b) fitted by
damped Newton iterations against smoothed targets (N+ + 1)/(N+ + 2) and
1/(N- + 2). The multiclass extension is one-vs-rest on per-class logits
followed by renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InputError, ShapeError

_P_EPS = 1e-12
_GRAD_TOL = 1e-8
_MAX_NEWTON = 200


class PlattFit(NamedTuple):
    a: float
    b: float
    degenerate: bool  # single-class labels; (a, b) is the smoothed base rate


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _nll(scores, targets, a, b):
    p = np.clip(_sigmoid(a * scores + b), _P_EPS, 1.0 - _P_EPS)
    return float(-(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p)).sum())


def fit_platt(scores: np.ndarray, binary_labels: np.ndarray) -> PlattFit:
    """Fit sigma(a*s + b) to 0/1 labels with Platt-smoothed targets.

    Damped Newton: steps that do not decrease the objective are retried
    with more damping, so the objective decreases monotonically. Stops at
    gradient norm < 1e-8 or 200 iterations. Single-class labels yield a
    degenerate flat calibrator at the smoothed base rate.
    """
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(binary_labels)
    if s.shape != lab.shape or s.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors")
    if len(s) == 0:
        raise InputError("cannot fit calibrator on empty data")
    pos = lab == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        base = (n_pos + 1.0) / (len(s) + 2.0)
        return PlattFit(0.0, float(np.log(base / (1.0 - base))), True)

    t_hi = (n_pos + 1.0) / (n_pos + 2.0)
    t_lo = 1.0 / (n_neg + 2.0)
    targets = np.where(pos, t_hi, t_lo)

    a, b = 0.0, float(np.log((n_pos + 1.0) / (n_neg + 1.0)))
    obj = _nll(s, targets, a, b)
    damping = 1e-6
    for _ in range(_MAX_NEWTON):
        p = _sigmoid(a * s + b)
        diff = p - targets
        grad = np.array([float(diff @ s), float(diff.sum())])
        if np.hypot(*grad) < _GRAD_TOL:
            break
        w = p * (1.0 - p)
        hess = np.array([[float(w @ (s * s)), float(w @ s)],
                         [float(w @ s), float(w.sum())]])
        # Retry with stronger damping until the step actually improves.
        accepted = False
        while damping < 1e12:
            try:
                step = np.linalg.solve(hess + damping * np.eye(2), grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            new_obj = _nll(s, targets, a - step[0], b - step[1])
            if new_obj <= obj:
                a, b = a - float(step[0]), b - float(step[1])
                obj = new_obj
                damping = max(damping * 0.1, 1e-12)
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            break
    return PlattFit(float(a), float(b), False)


@dataclass
class PlattCalibrator:
    """Per-class (a_k, b_k) sigmoid parameters over pre-softmax logits."""

    a: np.ndarray  # (K,)
    b: np.ndarray  # (K,)
    degenerate: np.ndarray  # (K,) bool flags from single-class fits

    @property
    def num_classes(self) -> int:
        return len(self.a)

    @classmethod
    def identity(cls, num_classes: int) -> "PlattCalibrator":
        return cls(np.ones(num_classes), np.zeros(num_classes),
                   np.zeros(num_classes, dtype=bool))

    @classmethod
    def fit(cls, logits: np.ndarray, labels: np.ndarray,
            num_classes: int) -> "PlattCalibrator":
        """One-vs-rest Platt fit of per-class logit scores."""
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] != num_classes:
            raise ShapeError(f"logits shape {logits.shape} does not match"
                             f" K={num_classes}")
        a = np.empty(num_classes)
        b = np.empty(num_classes)
        flags = np.zeros(num_classes, dtype=bool)
        for k in range(num_classes):
            fit = fit_platt(logits[:, k], (labels == k).astype(np.int64))
            a[k], b[k], flags[k] = fit.a, fit.b, fit.degenerate
        return cls(a, b, flags)


def calibrate_batch(logits: np.ndarray, cal: PlattCalibrator) -> np.ndarray:
    """Per-class sigmoids of the logits, renormalized to distributions."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != cal.num_classes:
        raise ShapeError(f"logits last dim {logits.shape[-1]} !="
                         f" K={cal.num_classes}")
    s = _sigmoid(logits * cal.a + cal.b)
    return s / s.sum(axis=-1, keepdims=True)


def calibrate(raw_logits: np.ndarray, cal: PlattCalibrator) -> np.ndarray:
    """Calibrated class distribution for one instance's logit vector."""
    return calibrate_batch(np.asarray(raw_logits, dtype=np.float64)[None, :],
                           cal)[0]


def expected_calibration_error(predictions, labels, bins: int = 10) -> float:
    """Standard ECE over equal-width max-probability bins."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    probs = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) == 0:
        raise InputError("predictions must be a nonempty (n, K) array")
    if len(labels) != len(probs):
        raise InputError("predictions and labels lengths differ")
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    ece = 0.0
    for k in range(bins):
        in_bin = idx == k
        n_k = int(in_bin.sum())
        if n_k == 0:
            continue
        gap = abs(correct[in_bin].mean() - conf[in_bin].mean())
        ece += (n_k / len(probs)) * gap
    return float(ece)
