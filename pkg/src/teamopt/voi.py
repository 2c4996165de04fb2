"""Value-of-information approaches to querying a human teammate.

Three calibrated models carry the probabilistic reasoning: p_alpha(y|x),
p_beta(h|x) and p_gamma(y|x,h) (the latter consumes onehot(h) appended to
x). The fixed approach trains each in isolation, calibrates, and queries
whenever the expected utility of asking, u_q, strictly exceeds the
expected utility of deciding alone, u_nq. The joint approach fine-tunes
all three networks end-to-end through softened maxima and a soft query
probability, refreshing the frozen Platt calibrators every
`calibration_interval` iterations. Decision time always uses the exact
(hard) rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .calibration import PlattCalibrator, calibrate_batch
from .discriminative import (TeamConfig, TeamPrediction, derive_rng,
                             train_solo_model, utility_loss_weights)
from .errors import (InputError, NumericError, QueryError, StateError,
                     TrainingError)
from .numerics import (PROB_CLAMP, MlpModel, TrainConfig, apply_mlp,
                       loss_and_grad, loss_value, logits_batch,
                       sample_dropout_masks, sgd_step, stable_softmax)

# rng stream ids, disjoint from the discriminative module's 0..5
STREAM_ALPHA = (10, 11, 12)  # init, batch, dropout
STREAM_BETA = (13, 14, 15)
STREAM_GAMMA = (16, 17, 18)
STREAM_CALIB_SPLIT = 19
STREAM_JOINT_BATCH = 20
STREAM_JOINT_DROP_A = 21
STREAM_JOINT_DROP_B = 22
STREAM_JOINT_DROP_G = 23


@dataclass
class CalibratedModel:
    """An MLP plus the Platt calibrator applied to its logits."""

    model: MlpModel
    calibrator: PlattCalibrator | None = None

    @property
    def calibrated(self) -> bool:
        return self.calibrator is not None

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        if self.calibrator is None:
            raise StateError("model is not calibrated")
        return calibrate_batch(logits_batch(self.model, X), self.calibrator)


@dataclass
class VoiSystem:
    p_alpha: CalibratedModel
    p_beta: CalibratedModel
    p_gamma: CalibratedModel
    team: TeamConfig
    train_cfg: TrainConfig

    @property
    def num_classes(self) -> int:
        return self.p_alpha.model.output_dim

    def require_calibrated(self) -> None:
        for name, part in (("p_alpha", self.p_alpha), ("p_beta", self.p_beta),
                           ("p_gamma", self.p_gamma)):
            if not part.calibrated:
                raise StateError(f"{name} is not calibrated")

    def decide_batch(self, X: np.ndarray, cost: float | None = None
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(no-query labels, query flags, per-h post-query labels)."""
        parts = voi_decision_parts(self, X)
        c = self.team.query_cost if cost is None else cost
        query = parts.u_q_base - c > parts.u_nq
        return parts.best_no_query, query, parts.best_by_h


@dataclass
class VoiDecision:
    u_nq: float
    u_q: float
    query: bool
    best_label_no_query: int


@dataclass
class VoiDecisionParts:
    """Cost-independent per-instance quantities behind the VOI rule.

    u_q equals u_q_base - c, so one pass over a dataset serves a whole
    grid of query costs.
    """

    u_nq: np.ndarray        # (n,)
    u_q_base: np.ndarray    # (n,) expectation term of u_q before cost
    best_no_query: np.ndarray  # (n,) int
    best_by_h: np.ndarray   # (n, K) int, utility-best action per response


def gamma_input(X: np.ndarray, h: np.ndarray, num_classes: int) -> np.ndarray:
    """Inputs for the label-given-response model: x with onehot(h) appended."""
    return np.concatenate([X, np.eye(num_classes)[h]], axis=1)


def gamma_all_input(X: np.ndarray, num_classes: int) -> np.ndarray:
    """Every (x, onehot(h)) pair, h-major within each instance: (n*K, d+K)."""
    n = X.shape[0]
    return np.concatenate([np.repeat(X, num_classes, axis=0),
                           np.tile(np.eye(num_classes), (n, 1))], axis=1)


# --- exact decision-time quantities -------------------------------------

def expected_utility_no_query(dist_alpha: np.ndarray, utility: np.ndarray
                              ) -> tuple[int, float]:
    """Best action and its expected utility under the label model alone."""
    eu = np.asarray(utility, dtype=np.float64) @ np.asarray(dist_alpha)
    best = int(np.argmax(eu))
    return best, float(eu[best])


def expected_utility_query(dist_beta: np.ndarray, gamma_fn, utility: np.ndarray,
                           cost: float) -> float:
    """E over responses of the best post-query expected utility, minus cost."""
    U = np.asarray(utility, dtype=np.float64)
    total = 0.0
    for h, p_h in enumerate(np.asarray(dist_beta)):
        eu = U @ np.asarray(gamma_fn(h), dtype=np.float64)
        total += p_h * float(eu.max())
    return total - cost


def voi_decision_parts(system: VoiSystem, X: np.ndarray) -> VoiDecisionParts:
    """Vectorized exact quantities for a batch; cost applied by the caller."""
    system.require_calibrated()
    X = np.asarray(X, dtype=np.float64)
    n, K = X.shape[0], system.num_classes
    U = system.team.utility
    pa = system.p_alpha.predict_batch(X)
    pb = system.p_beta.predict_batch(X)
    pg = system.p_gamma.predict_batch(gamma_all_input(X, K))  # (n*K, K)
    eu_nq = pa @ U.T  # (n, K) expected utility per action
    best_no_query = eu_nq.argmax(axis=1)
    u_nq = eu_nq[np.arange(n), best_no_query]
    eu_q = (pg @ U.T).reshape(n, K, K)  # [i, h, action]
    best_by_h = eu_q.argmax(axis=2)
    inner = eu_q.max(axis=2)  # (n, K)
    u_q_base = (pb * inner).sum(axis=1)
    return VoiDecisionParts(u_nq, u_q_base, best_no_query.astype(np.int64),
                            best_by_h.astype(np.int64))


def voi_decide(system: VoiSystem, x: np.ndarray) -> VoiDecision:
    """Exact rule on one instance: query iff u_q > u_nq (tie: no query)."""
    parts = voi_decision_parts(system, np.asarray(x, dtype=np.float64)[None, :])
    u_nq = float(parts.u_nq[0])
    u_q = float(parts.u_q_base[0]) - system.team.query_cost
    return VoiDecision(u_nq, u_q, u_q > u_nq, int(parts.best_no_query[0]))


def voi_team_predict(system: VoiSystem, x: np.ndarray,
                     human_response_provider) -> TeamPrediction:
    """Query per the exact rule; predict the utility-best action either way.

    q_soft reports the hard decision (1.0 when queried) since the exact
    rule has no soft score; machine_dist is the calibrated label model.
    """
    x = np.asarray(x, dtype=np.float64)
    decision = voi_decide(system, x)
    pa = system.p_alpha.predict_batch(x[None, :])[0]
    if not decision.query:
        return TeamPrediction(decision.best_label_no_query, False, 0.0, pa)
    try:
        h = int(human_response_provider(x))
    except Exception as e:
        raise QueryError(f"human response provider failed: {e}") from e
    K = system.num_classes
    if not 0 <= h < K:
        raise QueryError(f"human response {h} outside class range")
    pg = system.p_gamma.predict_batch(gamma_input(x[None, :],
                                                  np.array([h]), K))[0]
    label, _ = expected_utility_no_query(pg, system.team.utility)
    return TeamPrediction(label, True, 1.0, pa)


# --- soft (differentiable) quantities ------------------------------------

def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def soft_expected_utilities(pa: np.ndarray, pb: np.ndarray, pg_rows: np.ndarray,
                            utility: np.ndarray, tau: float
                            ) -> tuple[float, float, float]:
    """Soft u_nq, u_q and query probability from explicit distributions.

    pg_rows[h] is the label distribution after observing response h. Each
    hard max over actions becomes a softmax_tau-weighted average, and the
    query probability is the two-way softmax of (u_q, u_nq). Costs stay
    out of u_q here; they re-enter through the q*c loss term.
    """
    U = np.asarray(utility, dtype=np.float64)
    eu_nq = U @ np.asarray(pa)
    u_nq = float(eu_nq @ stable_softmax(eu_nq, tau))
    eu_q = np.asarray(pg_rows) @ U.T  # (K, K): [h, action]
    inner = (eu_q * stable_softmax(eu_q, tau)).sum(axis=1)
    u_q = float(np.asarray(pb) @ inner)
    q = float(_sigmoid_scalar((u_q - u_nq) / tau))
    return u_nq, u_q, q


def soft_team_quantities(system: VoiSystem, x: np.ndarray,
                         utility: np.ndarray | None = None,
                         tau: float | None = None
                         ) -> tuple[float, float, float]:
    """(u_nq_soft, u_q_soft, q_soft) for one instance, eval-mode networks."""
    system.require_calibrated()
    x = np.asarray(x, dtype=np.float64)[None, :]
    U = system.team.utility if utility is None else utility
    t = system.train_cfg.softmax_temperature if tau is None else tau
    K = system.num_classes
    pa = system.p_alpha.predict_batch(x)[0]
    pb = system.p_beta.predict_batch(x)[0]
    pg = system.p_gamma.predict_batch(gamma_all_input(x, K))
    return soft_expected_utilities(pa, pb, pg, U, t)


# --- joint training ------------------------------------------------------

@dataclass
class _JointBatch:
    X: np.ndarray
    X_gamma_all: np.ndarray   # (B*K, d+K)
    onehot_h3: np.ndarray     # (B, K, 1) selects p_gamma rows at observed h
    onehot_y: np.ndarray      # (B, K)
    w_y: np.ndarray           # (B,)
    cal_a: PlattCalibrator
    cal_b: PlattCalibrator
    cal_g: PlattCalibrator
    masks_a: list | None = None
    masks_b: list | None = None
    masks_g: list | None = None


def _calibrated_node(logits: tape.Node, cal: PlattCalibrator) -> tape.Node:
    # calibrator parameters enter as constants: frozen during backprop
    s = tape.sigmoid(logits * tape.constant(cal.a) + tape.constant(cal.b))
    return s / tape.sum_(s, axis=-1, keepdims=True)


def joint_voi_batch(system: VoiSystem, X: np.ndarray, h: np.ndarray,
                    y: np.ndarray, team: TeamConfig,
                    masks: tuple | None = None) -> _JointBatch:
    """Assemble the constant side of one training batch."""
    K = system.num_classes
    eye = np.eye(K)
    w = utility_loss_weights(team)
    masks_a, masks_b, masks_g = masks if masks is not None else (None,) * 3
    return _JointBatch(np.asarray(X, dtype=np.float64),
                       gamma_all_input(X, K), eye[h][:, :, None], eye[y],
                       w[y], system.p_alpha.calibrator,
                       system.p_beta.calibrator, system.p_gamma.calibrator,
                       masks_a, masks_b, masks_g)


def joint_voi_loss_fn(team: TeamConfig, cfg: TrainConfig):
    """Per-instance loss builder for loss_and_grad / finite_diff_check.

    Expects models {"alpha", "beta", "gamma"} and a _JointBatch. Follows
    the soft pipeline: softened maxima, two-way soft query probability,
    cross-entropy of the q-mixture of p_gamma(.|x,h) and p_alpha(.|x),
    plus cost_weight * q * c.
    """
    tau = cfg.softmax_temperature
    lam_c = cfg.cost_weight * team.query_cost
    Ut = team.utility.T.copy()

    def loss_fn(params, batch: _JointBatch):
        B, K = batch.onehot_y.shape
        pa = _calibrated_node(apply_mlp(params["alpha"], batch.X,
                                        batch.masks_a), batch.cal_a)
        pb = _calibrated_node(apply_mlp(params["beta"], batch.X,
                                        batch.masks_b), batch.cal_b)
        pg = _calibrated_node(apply_mlp(params["gamma"], batch.X_gamma_all,
                                        batch.masks_g), batch.cal_g)
        eu_nq = tape.matmul(pa, tape.constant(Ut))  # (B, K) actions
        u_nq = tape.sum_(eu_nq * tape.softmax(eu_nq, tau=tau), axis=-1)
        eu_q = tape.matmul(pg, tape.constant(Ut))  # (B*K, K)
        inner = tape.reshape(
            tape.sum_(eu_q * tape.softmax(eu_q, tau=tau), axis=-1), (B, K))
        u_q = tape.sum_(pb * inner, axis=-1)
        q = tape.sigmoid((u_q - u_nq) * (1.0 / tau))
        pg3 = tape.reshape(pg, (B, K, K))
        p_gamma_h = tape.sum_(pg3 * tape.constant(batch.onehot_h3), axis=1)
        q_col = tape.reshape(q, (B, 1))
        mix = q_col * p_gamma_h + (1.0 - q_col) * pa
        p_true = tape.sum_(mix * tape.constant(batch.onehot_y), axis=1)
        ce = tape.constant(batch.w_y) * -tape.log(
            tape.clamp_min(p_true, PROB_CLAMP))
        return ce + lam_c * q

    return loss_fn


def joint_voi_loss(system: VoiSystem, instance, team: TeamConfig,
                   cfg: TrainConfig) -> float:
    """Reference single-instance loss value (eval mode, no dropout)."""
    system.require_calibrated()
    batch = joint_voi_batch(system, instance.x[None, :],
                            np.array([instance.h]), np.array([instance.y]),
                            team)
    models = {"alpha": system.p_alpha.model, "beta": system.p_beta.model,
              "gamma": system.p_gamma.model}
    return loss_value(models, batch, joint_voi_loss_fn(team, cfg))


def _calibration_split(dataset, seed: int):
    n = len(dataset)
    n_cal = max(1, n // 5)
    if n - n_cal < 1:
        raise InputError("dataset too small to hold out a calibration slice")
    perm = derive_rng(seed, STREAM_CALIB_SPLIT).permutation(n)
    return (dataset.subset(perm[n_cal:], f"{dataset.name}/fit"),
            dataset.subset(perm[:n_cal], f"{dataset.name}/calib"))


def _refit_calibrators(a_m: MlpModel, b_m: MlpModel, g_m: MlpModel,
                       calib_ds) -> tuple[PlattCalibrator, ...]:
    K = calib_ds.num_classes
    Xc, yc, hc = calib_ds.X, calib_ds.y, calib_ds.h
    cal_a = PlattCalibrator.fit(logits_batch(a_m, Xc), yc, K)
    cal_b = PlattCalibrator.fit(logits_batch(b_m, Xc), hc, K)
    cal_g = PlattCalibrator.fit(logits_batch(g_m, gamma_input(Xc, hc, K)),
                                yc, K)
    return cal_a, cal_b, cal_g


def train_fixed_voi(dataset, team: TeamConfig, cfg: TrainConfig) -> VoiSystem:
    """Train alpha, beta, gamma in isolation; Platt-calibrate each.

    Networks fit on 80% of the dataset; the held-out 20% slice feeds the
    calibrators (and every later recalibration of a joint run).
    """
    fit_ds, calib_ds = _calibration_split(dataset, cfg.seed)
    K = dataset.num_classes
    a_m = train_solo_model(fit_ds, team, cfg, streams=STREAM_ALPHA)
    b_m = train_solo_model(fit_ds, team, cfg, targets=fit_ds.h,
                           streams=STREAM_BETA)
    g_m = train_solo_model(fit_ds, team, cfg, streams=STREAM_GAMMA,
                           input_matrix=gamma_input(fit_ds.X, fit_ds.h, K))
    cal_a, cal_b, cal_g = _refit_calibrators(a_m, b_m, g_m, calib_ds)
    return VoiSystem(CalibratedModel(a_m, cal_a), CalibratedModel(b_m, cal_b),
                     CalibratedModel(g_m, cal_g), team, cfg)


def train_joint_voi(dataset, team: TeamConfig, cfg: TrainConfig,
                    warm_start: VoiSystem | None = None) -> VoiSystem:
    """Fine-tune all three networks end-to-end through the soft rule.

    Starts from a fixed-VOI solution (trained here when not supplied),
    runs T SGD iterations on the soft joint loss with calibrators frozen,
    refits the calibrators on the held-out slice every
    `calibration_interval` iterations, and always refits once at the end.
    """
    fit_ds, calib_ds = _calibration_split(dataset, cfg.seed)
    start = warm_start or train_fixed_voi(dataset, team, cfg)
    start.require_calibrated()
    a_m, b_m, g_m = (start.p_alpha.model, start.p_beta.model,
                     start.p_gamma.model)
    cals = (start.p_alpha.calibrator, start.p_beta.calibrator,
            start.p_gamma.calibrator)
    X, y, h = fit_ds.X, fit_ds.y, fit_ds.h
    n = len(fit_ds)
    rng_batch = derive_rng(cfg.seed, STREAM_JOINT_BATCH)
    rng_da = derive_rng(cfg.seed, STREAM_JOINT_DROP_A)
    rng_db = derive_rng(cfg.seed, STREAM_JOINT_DROP_B)
    rng_dg = derive_rng(cfg.seed, STREAM_JOINT_DROP_G)
    loss_fn = joint_voi_loss_fn(team, cfg)
    K = dataset.num_classes
    eye = np.eye(K)
    w = utility_loss_weights(team)
    for it in range(cfg.iterations):
        idx = rng_batch.choice(n, size=min(cfg.batch_size, n), replace=False)
        B = len(idx)
        Xb, hb, yb = X[idx], h[idx], y[idx]
        batch = _JointBatch(Xb, gamma_all_input(Xb, K), eye[hb][:, :, None],
                            eye[yb], w[yb], *cals,
                            sample_dropout_masks(a_m, B, rng_da),
                            sample_dropout_masks(b_m, B, rng_db),
                            sample_dropout_masks(g_m, B * K, rng_dg))
        models = {"alpha": a_m, "beta": b_m, "gamma": g_m}
        try:
            _, grads = loss_and_grad(models, batch, loss_fn)
        except NumericError as e:
            raise TrainingError(f"joint training diverged at iteration {it}",
                                iteration=it) from e
        a_m = sgd_step(a_m, grads["alpha"], cfg.learning_rate)
        b_m = sgd_step(b_m, grads["beta"], cfg.learning_rate)
        g_m = sgd_step(g_m, grads["gamma"], cfg.learning_rate)
        if (it + 1) % cfg.calibration_interval == 0 and it + 1 < cfg.iterations:
            cals = _refit_calibrators(a_m, b_m, g_m, calib_ds)
    cals = _refit_calibrators(a_m, b_m, g_m, calib_ds)
    return VoiSystem(CalibratedModel(a_m, cals[0]),
                     CalibratedModel(b_m, cals[1]),
                     CalibratedModel(g_m, cals[2]), team, cfg)
