"""Differentiable MLP core: forward passes, loss gradients, SGD, checks.

Models are plain dataclasses of float64 arrays and are treated as immutable
values: `sgd_step` returns a new model. Training losses are built on the
reverse-mode tape in `teamopt.tape`; the contract for every loss in this
package is agreement with central finite differences (see
`finite_diff_check`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tape
from .errors import ConfigError, InputError, NumericError, ShapeError

SOFTMAX_HEAD = "softmax"
SIGMOID_HEAD = "sigmoid"

PROB_CLAMP = 1e-12  # floor applied to probabilities before logs


@dataclass
class TrainConfig:
    """Hyperparameters shared by every training loop in the package.

    `hidden_dims` sizes the networks the trainers build; `cost_weight`
    scales the query-cost term of the joint losses; `softmax_temperature`
    sharpens or smooths the soft maxima of the differentiable VOI pipeline.
    """

    learning_rate: float = 0.1
    batch_size: int = 64
    iterations: int = 2000
    calibration_interval: int = 200
    softmax_temperature: float = 1.0
    cost_weight: float = 1.0
    seed: int = 0
    dropout_rate: float = 0.2
    hidden_dims: tuple[int, ...] = (16,)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be >= 1")
        if self.calibration_interval < 1:
            raise ConfigError("calibration_interval must be >= 1")
        if self.softmax_temperature <= 0:
            raise ConfigError("softmax_temperature must be positive")
        if self.cost_weight < 0:
            raise ConfigError("cost_weight must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class MlpModel:
    """Fully-connected ReLU network with a softmax or scalar-sigmoid head.

    Weights are stored (fan_in, fan_out) so a batch X of shape (n, d)
    flows as X @ W + b. Dropout (inverted) applies to hidden activations
    in train mode only.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_head: str = SOFTMAX_HEAD
    dropout_rate: float = 0.2

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def validate(self) -> None:
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ShapeError(f"bad layer_dims {self.layer_dims}")
        if self.output_head not in (SOFTMAX_HEAD, SIGMOID_HEAD):
            raise ConfigError(f"unknown output head {self.output_head!r}")
        if self.output_head == SIGMOID_HEAD and self.output_dim != 1:
            raise ShapeError("sigmoid head requires output dim 1")
        if len(self.weights) != len(self.layer_dims) - 1:
            raise ShapeError("weight count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ShapeError(f"layer {i}: weight {w.shape}, bias {b.shape},"
                                 f" expected {want}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"non-finite parameters in layer {i}")


@dataclass
class GradientSet:
    """Per-parameter gradients mirroring an MlpModel's shapes."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def max_abs(self) -> float:
        parts = [np.abs(g).max(initial=0.0) for g in self.weights + self.biases]
        return max(parts, default=0.0)


def init_mlp(layer_dims, output_head: str, rng: np.random.Generator,
             dropout_rate: float = 0.2) -> MlpModel:
    """Seeded Glorot-uniform weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    model = MlpModel(dims, weights, biases, output_head, dropout_rate)
    model.validate()
    return model


def stable_softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """softmax(logits / tau) with max-subtraction; safe for huge logits."""
    if tau <= 0:
        raise ConfigError("softmax temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_dropout_masks(model: MlpModel, n: int,
                         rng: np.random.Generator) -> list[np.ndarray] | None:
    """Inverted-dropout masks for each hidden layer of a batch of n rows."""
    p = model.dropout_rate
    if p == 0.0:
        return None
    keep = 1.0 - p
    return [(rng.random((n, dim)) >= p) / keep
            for dim in model.layer_dims[1:-1]]


def _check_input(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {X.shape} does not match model input"
                         f" dim {model.input_dim}")
    if not np.isfinite(X).all():
        raise InputError("non-finite feature values")
    return X


def logits_batch(model: MlpModel, X: np.ndarray, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Pre-head activations for a batch; dropout only in train mode."""
    X = _check_input(model, X)
    masks = None
    if mode == "train":
        if rng is None:
            raise ConfigError("train mode requires an rng for dropout")
        masks = sample_dropout_masks(model, X.shape[0], rng)
    elif mode != "eval":
        raise ConfigError(f"unknown mode {mode!r}")
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
            if masks is not None:
                h = h * masks[i]
    return h


def forward_batch(model: MlpModel, X: np.ndarray, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Head outputs for a batch: (n, K) distributions or (n,) sigmoids."""
    z = logits_batch(model, X, mode, rng)
    if model.output_head == SOFTMAX_HEAD:
        return stable_softmax(z)
    return _sigmoid(z[:, 0])


def forward(model: MlpModel, x: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None):
    """Single-instance forward: a distribution over K classes, or a scalar."""
    out = forward_batch(model, np.asarray(x, dtype=np.float64)[None, :], mode, rng)
    return out[0] if model.output_head == SOFTMAX_HEAD else float(out[0])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def is_distribution(p: np.ndarray, atol: float = 1e-9) -> bool:
    return bool((p >= -atol).all() and abs(p.sum() - 1.0) <= atol)


# --- tape-side helpers -------------------------------------------------

def param_nodes(model: MlpModel) -> list[tuple[tape.Node, tape.Node]]:
    """Wrap a model's parameters as gradient-tracked tape nodes."""
    return [(tape.param(w), tape.param(b))
            for w, b in zip(model.weights, model.biases)]


def apply_mlp(nodes, X: np.ndarray, masks=None) -> tape.Node:
    """Run an MLP on the tape; returns the logits node.

    `nodes` are (W, b) pairs from `param_nodes`; `masks` are pre-sampled
    dropout masks (constants on the tape) or None for eval behaviour.
    """
    h = tape.constant(X)
    last = len(nodes) - 1
    for i, (w, b) in enumerate(nodes):
        h = tape.matmul(h, w) + b
        if i < last:
            h = tape.relu(h)
            if masks is not None:
                h = h * tape.constant(masks[i])
    return h


def grads_of(nodes) -> GradientSet:
    """Collect accumulated gradients from (W, b) node pairs."""
    weights = [w.grad if w.grad is not None else np.zeros_like(w.data)
               for w, _ in nodes]
    biases = [b.grad if b.grad is not None else np.zeros_like(b.data)
              for _, b in nodes]
    return GradientSet(weights, biases)


def loss_and_grad(models: dict[str, MlpModel], batch, loss_fn
                  ) -> tuple[float, dict[str, GradientSet]]:
    """Minibatch-mean loss and exact reverse-mode gradients.

    `loss_fn(params, batch)` receives {name: [(W, b) nodes]} for each model
    and must return the per-instance loss as a tape node of shape (n,);
    the mean is taken here. Models absent from `models` (e.g. frozen
    calibrators, which never become tape nodes) receive no gradient.
    """
    params = {name: param_nodes(m) for name, m in models.items()}
    per_instance = loss_fn(params, batch)
    vec = np.atleast_1d(per_instance.data)
    if not np.isfinite(vec).all():
        idx = int(np.flatnonzero(~np.isfinite(vec))[0])
        raise NumericError(f"non-finite loss at instance {idx}", index=idx)
    loss = tape.sum_(per_instance) * (1.0 / vec.size)
    tape.backward(loss)
    return float(loss.data), {name: grads_of(nodes)
                              for name, nodes in params.items()}


def loss_value(models: dict[str, MlpModel], batch, loss_fn) -> float:
    """Mean loss only, no gradients (used by the finite-difference oracle)."""
    params = {name: [(tape.constant(w), tape.constant(b))
                     for w, b in zip(m.weights, m.biases)]
              for name, m in models.items()}
    per_instance = loss_fn(params, batch)
    return float(np.atleast_1d(per_instance.data).mean())


def sgd_step(model: MlpModel, grads: GradientSet, learning_rate: float) -> MlpModel:
    """One plain SGD update; returns a new model, inputs untouched."""
    if len(grads.weights) != len(model.weights):
        raise ShapeError("gradient set does not match model")
    for gw, w in zip(grads.weights, model.weights):
        if gw.shape != w.shape:
            raise ShapeError(f"gradient shape {gw.shape} != weight {w.shape}")
    new_w = [w - learning_rate * g for w, g in zip(model.weights, grads.weights)]
    new_b = [b - learning_rate * g for b, g in zip(model.biases, grads.biases)]
    return replace(model, weights=new_w, biases=new_b)


def finite_diff_check(models: dict[str, MlpModel], batch, loss_fn,
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |analytic - numeric| / max(1, |analytic|), maximized
    over every unfrozen parameter of every model.
    """
    if step <= 0:
        raise ConfigError("step must be positive")
    _, grads = loss_and_grad(models, batch, loss_fn)
    worst = 0.0
    for name, model in models.items():
        gset = grads[name]
        for arrays, garrays in ((model.weights, gset.weights),
                                (model.biases, gset.biases)):
            for arr, garr in zip(arrays, garrays):
                flat = arr.ravel()
                gflat = garr.ravel()
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + step
                    hi = loss_value(models, batch, loss_fn)
                    flat[j] = orig - step
                    lo = loss_value(models, batch, loss_fn)
                    flat[j] = orig
                    numeric = (hi - lo) / (2.0 * step)
                    err = abs(gflat[j] - numeric) / max(1.0, abs(gflat[j]))
                    worst = max(worst, err)
    return worst
