"""Fixed and joint discriminative training of a predictor and query policy.

The predictor m is a softmax MLP, the query policy q a scalar-sigmoid MLP
over the same features. The fixed approach trains m alone and then fits q
against the frozen m; the joint approach optimizes both at once through
the mixture loss

    w[y] * CE(y, q * onehot(h) + (1 - q) * m(x)) + lambda * c * q

so the predictor can cede regions the policy routes to the human. At run
time the discrete query rule fires iff (1 - q) * max(m(x)) < q.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import InputError, NumericError, QueryError, TrainingError
from .numerics import (PROB_CLAMP, SIGMOID_HEAD, SOFTMAX_HEAD, MlpModel,
                       TrainConfig, apply_mlp, forward_batch, init_mlp,
                       loss_and_grad, sample_dropout_masks, sgd_step)

# Deterministic rng stream ids; stage-1/solo training of m must share the
# m streams with joint training so the q-frozen trajectories coincide.
STREAM_INIT_M = 0
STREAM_INIT_Q = 1
STREAM_BATCH = 2
STREAM_DROP_M = 3
STREAM_DROP_Q = 4
STREAM_BATCH_Q = 5


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(stream)))


@dataclass
class TeamConfig:
    """Utility matrix U[pred][truth] and the cost of one human query."""

    utility: np.ndarray
    query_cost: float = 0.0

    def __post_init__(self):
        self.utility = np.asarray(self.utility, dtype=np.float64)
        K = self.utility.shape[0]
        if self.utility.ndim != 2 or self.utility.shape != (K, K):
            raise InputError("utility must be a square matrix")
        if not np.isfinite(self.utility).all():
            raise InputError("utility must be finite")
        if self.query_cost < 0:
            raise InputError("query_cost must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.utility.shape[0]

    @classmethod
    def accuracy(cls, num_classes: int, query_cost: float = 0.0) -> "TeamConfig":
        return cls(np.eye(num_classes), query_cost)

    def with_cost(self, query_cost: float) -> "TeamConfig":
        return TeamConfig(self.utility, query_cost)


@dataclass
class TeamPrediction:
    predicted_label: int
    queried: bool
    q_soft: float
    machine_dist: np.ndarray


def utility_loss_weights(team: TeamConfig) -> np.ndarray:
    """Per-true-class CE weights from the utility spread, mean-normalized.

    w[y] is the utility lost by the worst prediction relative to the
    correct one, scaled so the mean weight is 1. Identity utility gives
    all-ones; scaling U leaves w unchanged.
    """
    U = team.utility
    spread = np.diag(U) - U.min(axis=0)
    if (spread == 0).any():
        warnings.warn("utility has no spread for some true class;"
                      " its loss weight is 0")
    total = spread.sum()
    if total == 0:
        return np.zeros_like(spread)
    return spread * (len(spread) / total)


def joint_loss(m_dist: np.ndarray, q_val: float, h: int, y: int,
               team: TeamConfig, cost_weight: float) -> float:
    """Mixture-loss value for one instance (reference scalar form)."""
    w = utility_loss_weights(team)
    mix = np.asarray(m_dist, dtype=np.float64) * (1.0 - q_val)
    mix[h] += q_val
    p_true = max(mix[y], PROB_CLAMP)
    return float(w[y] * -np.log(p_true) + cost_weight * team.query_cost * q_val)


def runtime_query_decision(q_val: float, m_dist: np.ndarray) -> bool:
    """Query iff (1 - q) * max(m) < q; ties resolve to no query."""
    return (1.0 - q_val) * float(np.max(m_dist)) < q_val


@dataclass
class DiscriminativeSystem:
    m: MlpModel
    q: MlpModel
    team: TeamConfig
    train_cfg: TrainConfig

    def machine_batch(self, X: np.ndarray) -> np.ndarray:
        return forward_batch(self.m, X)

    def machine_label(self, x: np.ndarray) -> int:
        return int(np.argmax(forward_batch(self.m, x[None, :])[0]))

    def decide_batch(self, X: np.ndarray, h: np.ndarray, cost: float | None = None
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized team decisions: (labels, queried, q_vals).

        The runtime rule is cost-free, so `cost` is accepted only for
        interface parity with the VOI system.
        """
        m_probs = forward_batch(self.m, X)
        q_vals = forward_batch(self.q, X)
        queried = (1.0 - q_vals) * m_probs.max(axis=1) < q_vals
        labels = np.where(queried, h, m_probs.argmax(axis=1))
        return labels.astype(np.int64), queried, q_vals

    def predict(self, x: np.ndarray, human_response_provider) -> TeamPrediction:
        return team_predict(self, x, human_response_provider)


def team_predict(system: DiscriminativeSystem, x: np.ndarray,
                 human_response_provider) -> TeamPrediction:
    """Evaluate the runtime rule on one instance, querying when it fires."""
    x = np.asarray(x, dtype=np.float64)
    m_dist = forward_batch(system.m, x[None, :])[0]
    q_val = float(forward_batch(system.q, x[None, :])[0])
    if runtime_query_decision(q_val, m_dist):
        try:
            label = int(human_response_provider(x))
        except Exception as e:
            raise QueryError(f"human response provider failed: {e}") from e
        return TeamPrediction(label, True, q_val, m_dist)
    return TeamPrediction(int(np.argmax(m_dist)), False, q_val, m_dist)


# --- training ----------------------------------------------------------

def _batch_indices(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.choice(n, size=min(size, n), replace=False)


def _solo_ce_loss(params_m, batch):
    X, onehot_y, w_y, masks = batch
    probs = tape.softmax(apply_mlp(params_m, X, masks))
    p_true = tape.sum_(probs * tape.constant(onehot_y), axis=1)
    return tape.constant(w_y) * -tape.log(tape.clamp_min(p_true, PROB_CLAMP))


def train_solo_model(dataset, team: TeamConfig, cfg: TrainConfig,
                     targets: np.ndarray | None = None,
                     streams: tuple[int, int, int] = (STREAM_INIT_M,
                                                      STREAM_BATCH,
                                                      STREAM_DROP_M),
                     input_matrix: np.ndarray | None = None) -> MlpModel:
    """Weighted-CE training of one softmax MLP in isolation.

    `targets` defaults to the labels y; passing dataset.h (or anything
    else in class range) retargets the same loop, which is how the VOI
    module trains its component models.
    """
    X = dataset.X if input_matrix is None else input_matrix
    t = dataset.y if targets is None else targets
    K = dataset.num_classes
    w = utility_loss_weights(team)
    dims = (X.shape[1], *cfg.hidden_dims, K)
    rng_init = derive_rng(cfg.seed, streams[0])
    rng_batch = derive_rng(cfg.seed, streams[1])
    rng_drop = derive_rng(cfg.seed, streams[2])
    model = init_mlp(dims, SOFTMAX_HEAD, rng_init, cfg.dropout_rate)
    eye = np.eye(K)
    for it in range(cfg.iterations):
        idx = _batch_indices(rng_batch, len(X), cfg.batch_size)
        masks = sample_dropout_masks(model, len(idx), rng_drop)
        batch = (X[idx], eye[t[idx]], w[t[idx]], masks)
        try:
            _, grads = loss_and_grad({"m": model}, batch,
                                     lambda p, b: _solo_ce_loss(p["m"], b))
        except NumericError as e:
            raise TrainingError(f"solo training diverged at iteration {it}",
                                iteration=it) from e
        model = sgd_step(model, grads["m"], cfg.learning_rate)
    return model


def _mixture_nodes(q_node, m_probs, onehot_h, onehot_y, w_y, team, lam):
    q_col = tape.reshape(q_node, (-1, 1))
    mix = q_col * tape.constant(onehot_h) + (1.0 - q_col) * m_probs
    p_true = tape.sum_(mix * tape.constant(onehot_y), axis=1)
    ce = tape.constant(w_y) * -tape.log(tape.clamp_min(p_true, PROB_CLAMP))
    return ce + (lam * team.query_cost) * q_node


def _direct_relaxation_nodes(q_node, m_probs, onehot_h, onehot_y, w_y,
                             team, lam):
    # Less stable alternative kept for ablation only:
    # q * loss(query) + (1 - q) * loss(no query) + lambda * c * q.
    w_node = tape.constant(w_y)
    p_h = np.maximum((onehot_h * onehot_y).sum(axis=1), PROB_CLAMP)
    ce_query = tape.constant(w_y * -np.log(p_h))
    p_m = tape.sum_(m_probs * tape.constant(onehot_y), axis=1)
    ce_machine = w_node * -tape.log(tape.clamp_min(p_m, PROB_CLAMP))
    return (q_node * ce_query + (1.0 - q_node) * ce_machine
            + (lam * team.query_cost) * q_node)


def train_query_policy(m: MlpModel, dataset, team: TeamConfig,
                       cfg: TrainConfig) -> MlpModel:
    """Stage 2 of the fixed approach: fit q against a frozen predictor."""
    X, y, h = dataset.X, dataset.y, dataset.h
    K = dataset.num_classes
    w = utility_loss_weights(team)
    eye = np.eye(K)
    m_probs_all = forward_batch(m, X)  # frozen, eval mode: plain constants
    rng_init = derive_rng(cfg.seed, STREAM_INIT_Q)
    rng_batch = derive_rng(cfg.seed, STREAM_BATCH_Q)
    rng_drop = derive_rng(cfg.seed, STREAM_DROP_Q)
    q = init_mlp((X.shape[1], *cfg.hidden_dims, 1), SIGMOID_HEAD, rng_init,
                 cfg.dropout_rate)
    lam = cfg.cost_weight

    def loss_fn(params, batch):
        Xb, m_pb, oh_h, oh_y, w_y, masks = batch
        q_node = tape.sigmoid(tape.reshape(apply_mlp(params["q"], Xb, masks),
                                           (-1,)))
        return _mixture_nodes(q_node, tape.constant(m_pb), oh_h, oh_y, w_y,
                              team, lam)

    for it in range(cfg.iterations):
        idx = _batch_indices(rng_batch, len(X), cfg.batch_size)
        masks = sample_dropout_masks(q, len(idx), rng_drop)
        batch = (X[idx], m_probs_all[idx], eye[h[idx]], eye[y[idx]],
                 w[y[idx]], masks)
        try:
            _, grads = loss_and_grad({"q": q}, batch, loss_fn)
        except NumericError as e:
            raise TrainingError(f"query-policy training diverged at"
                                f" iteration {it}", iteration=it) from e
        q = sgd_step(q, grads["q"], cfg.learning_rate)
    return q


def train_fixed(dataset, team: TeamConfig, cfg: TrainConfig,
                solo_model: MlpModel | None = None) -> DiscriminativeSystem:
    """Train m in isolation, then fit the query policy with m frozen.

    `solo_model` short-circuits stage 1 with an already-trained predictor
    (it must come from `train_solo_model` with the same seed for the run
    to stay reproducible).
    """
    m = solo_model or train_solo_model(dataset, team, cfg)
    q = train_query_policy(m, dataset, team, cfg)
    return DiscriminativeSystem(m, q, team, cfg)


def train_joint(dataset, team: TeamConfig, cfg: TrainConfig,
                q_override: float | None = None,
                relaxation: str = "mixture") -> DiscriminativeSystem:
    """End-to-end SGD of m and q on the mixture loss.

    `q_override` pins the query probability to a constant (no gradient to
    q), which reduces training to weighted CE on m; `relaxation="direct"`
    switches to the unstable per-branch relaxation for ablations.
    """
    if relaxation not in ("mixture", "direct"):
        raise InputError(f"unknown relaxation {relaxation!r}")
    loss_nodes = (_mixture_nodes if relaxation == "mixture"
                  else _direct_relaxation_nodes)
    X, y, h = dataset.X, dataset.y, dataset.h
    K = dataset.num_classes
    w = utility_loss_weights(team)
    eye = np.eye(K)
    rng_batch = derive_rng(cfg.seed, STREAM_BATCH)
    rng_drop_m = derive_rng(cfg.seed, STREAM_DROP_M)
    rng_drop_q = derive_rng(cfg.seed, STREAM_DROP_Q)
    m = init_mlp((X.shape[1], *cfg.hidden_dims, K), SOFTMAX_HEAD,
                 derive_rng(cfg.seed, STREAM_INIT_M), cfg.dropout_rate)
    q = init_mlp((X.shape[1], *cfg.hidden_dims, 1), SIGMOID_HEAD,
                 derive_rng(cfg.seed, STREAM_INIT_Q), cfg.dropout_rate)
    lam = cfg.cost_weight

    def loss_fn(params, batch):
        Xb, oh_h, oh_y, w_y, masks_m, masks_q = batch
        m_probs = tape.softmax(apply_mlp(params["m"], Xb, masks_m))
        if q_override is None:
            q_node = tape.sigmoid(tape.reshape(
                apply_mlp(params["q"], Xb, masks_q), (-1,)))
        else:
            q_node = tape.constant(np.full(len(Xb), q_override))
        return loss_nodes(q_node, m_probs, oh_h, oh_y, w_y, team, lam)

    for it in range(cfg.iterations):
        idx = _batch_indices(rng_batch, len(X), cfg.batch_size)
        masks_m = sample_dropout_masks(m, len(idx), rng_drop_m)
        masks_q = None
        if q_override is None:
            masks_q = sample_dropout_masks(q, len(idx), rng_drop_q)
        batch = (X[idx], eye[h[idx]], eye[y[idx]], w[y[idx]], masks_m, masks_q)
        try:
            _, grads = loss_and_grad({"m": m, "q": q}, batch, loss_fn)
        except NumericError as e:
            raise TrainingError(f"joint training diverged at iteration {it}",
                                iteration=it) from e
        m = sgd_step(m, grads["m"], cfg.learning_rate)
        if q_override is None:
            q = sgd_step(q, grads["q"], cfg.learning_rate)
    return DiscriminativeSystem(m, q, team, cfg)
