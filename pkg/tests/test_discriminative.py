"""Discriminative team training: loss geometry, runtime rule, and trainers."""

import warnings

import numpy as np
import pytest

from teamopt.data import Dataset
from teamopt.discriminative import (DiscriminativeSystem, TeamConfig,
                                    derive_rng, joint_loss,
                                    runtime_query_decision, team_predict,
                                    train_fixed, train_joint,
                                    train_query_policy, train_solo_model,
                                    utility_loss_weights)
from teamopt.errors import InputError, QueryError, TrainingError
from teamopt.numerics import PROB_CLAMP, TrainConfig, forward_batch

# frozen: -ln(0.75) + 1.0 * 0.1 * 0.5
JOINT_LOSS_MIX = 0.3376820724517809
# frozen: (2/3) * -ln(0.1)
JOINT_LOSS_WRONG = 1.5350567286626973


def noise_dataset(n=300, k=3, d=4, seed=11):
    """Unlearnable features with a perfect human: querying is the only win."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.integers(0, k, n)
    return Dataset(X, y, y.copy(), k, "noise")


def separable_dataset(n=300, seed=11):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    X = np.concatenate([np.eye(3)[y], rng.standard_normal((n, 1))], axis=1)
    return Dataset(X, y, (y + 1) % 3, 3, "sep")


def models_equal(a, b):
    return (all(np.array_equal(w1, w2) for w1, w2 in zip(a.weights, b.weights))
            and all(np.array_equal(b1, b2)
                    for b1, b2 in zip(a.biases, b.biases)))


# --- config and weights ------------------------------------------------------

def test_team_config_validation():
    with pytest.raises(InputError):
        TeamConfig(np.zeros((2, 3)))
    with pytest.raises(InputError):
        TeamConfig(np.array([[1.0, np.inf], [0.0, 1.0]]))
    with pytest.raises(InputError):
        TeamConfig(np.eye(2), query_cost=-0.1)
    team = TeamConfig.accuracy(4, 0.3)
    assert team.num_classes == 4
    assert np.array_equal(team.utility, np.eye(4))
    swapped = team.with_cost(0.7)
    assert swapped.query_cost == 0.7 and team.query_cost == 0.3


def test_loss_weights_identity_is_uniform():
    w = utility_loss_weights(TeamConfig.accuracy(5))
    assert np.array_equal(w, np.ones(5))


def test_loss_weights_asymmetric_example():
    # spread per column: (2, 1); mean-normalized to (4/3, 2/3)
    team = TeamConfig(np.array([[1.0, 0.0], [-1.0, 1.0]]))
    w = utility_loss_weights(team)
    assert np.allclose(w, [4.0 / 3.0, 2.0 / 3.0], atol=1e-15)
    assert abs(w.mean() - 1.0) < 1e-15


def test_loss_weights_scale_invariant():
    U = np.array([[2.0, -1.0, 0.0], [0.5, 3.0, 1.0], [0.0, 0.0, 2.5]])
    w1 = utility_loss_weights(TeamConfig(U))
    w2 = utility_loss_weights(TeamConfig(10.0 * U))
    assert np.allclose(w1, w2, atol=1e-12)


def test_loss_weights_zero_spread_warns():
    with pytest.warns(UserWarning):
        w = utility_loss_weights(TeamConfig(np.array([[1.0, 1.0], [1.0, 1.0]])))
    assert np.array_equal(w, np.zeros(2))
    with pytest.warns(UserWarning):
        w = utility_loss_weights(TeamConfig(np.array([[1.0, 0.0], [0.0, 0.0]])))
    assert np.array_equal(w, np.array([2.0, 0.0]))


# --- scalar loss and runtime rule --------------------------------------------

def test_joint_loss_hand_example():
    team = TeamConfig.accuracy(2, query_cost=0.1)
    val = joint_loss(np.array([0.5, 0.5]), 0.5, h=0, y=0, team=team,
                     cost_weight=1.0)
    assert abs(val - JOINT_LOSS_MIX) < 1e-15


def test_joint_loss_weighted_wrong_prediction():
    team = TeamConfig(np.array([[1.0, 0.0], [-1.0, 1.0]]))
    val = joint_loss(np.array([0.9, 0.1]), 0.0, h=1, y=1, team=team,
                     cost_weight=1.0)
    assert abs(val - JOINT_LOSS_WRONG) < 1e-12


def test_joint_loss_clamps_zero_probability():
    team = TeamConfig.accuracy(2)
    val = joint_loss(np.array([1.0, 0.0]), 0.0, h=0, y=1, team=team,
                     cost_weight=1.0)
    assert val == -np.log(PROB_CLAMP)


def test_joint_loss_query_cost_scales_with_q():
    team = TeamConfig.accuracy(2, query_cost=0.4)
    base = joint_loss(np.array([0.5, 0.5]), 0.0, 0, 0, team, cost_weight=2.0)
    full = joint_loss(np.array([0.5, 0.5]), 1.0, 0, 0, team, cost_weight=2.0)
    # q=1 routes to the (correct) human: CE term vanishes, cost term is lam*c
    assert abs(full - 0.8) < 1e-12
    assert abs(base - -np.log(0.5)) < 1e-15


def test_runtime_rule_examples():
    assert runtime_query_decision(0.5, np.array([0.6, 0.4]))
    assert not runtime_query_decision(0.2, np.array([0.6, 0.4]))
    # exact tie resolves to no query
    assert not runtime_query_decision(0.5, np.array([1.0, 0.0]))
    assert not runtime_query_decision(0.0, np.array([0.5, 0.5]))
    assert runtime_query_decision(1.0, np.array([1.0, 0.0]))


# --- prediction paths ---------------------------------------------------------

def build_system(ds, team=None, iterations=50, **kw):
    team = team or TeamConfig.accuracy(ds.num_classes)
    cfg = TrainConfig(iterations=iterations, hidden_dims=(8,), seed=7, **kw)
    return train_joint(ds, team, cfg)


def test_decide_batch_matches_single_predictions():
    ds = noise_dataset()
    system = build_system(ds)
    labels, queried, q_vals = system.decide_batch(ds.X, ds.h)
    assert labels.dtype == np.int64 and queried.dtype == np.bool_
    for i in range(0, len(ds.X), 37):
        pred = team_predict(system, ds.X[i], lambda x, i=i: ds.h[i])
        assert pred.queried == queried[i]
        assert pred.predicted_label == labels[i]
        assert abs(pred.q_soft - q_vals[i]) < 1e-12


def test_team_predict_skips_provider_when_not_querying():
    ds = noise_dataset()
    system = build_system(ds, team=TeamConfig.accuracy(3, 2.0),
                          iterations=400, cost_weight=4.0)
    calls = []

    def provider(x):
        calls.append(1)
        return 0

    pred = team_predict(system, ds.X[0], provider)
    assert not pred.queried
    assert calls == []
    assert pred.predicted_label == int(np.argmax(pred.machine_dist))


def test_team_predict_wraps_provider_failure():
    ds = noise_dataset()
    system = build_system(ds, iterations=400)  # cost-free: always queries

    def broken(x):
        raise ValueError("offline")

    with pytest.raises(QueryError):
        team_predict(system, ds.X[0], broken)
    pred = team_predict(system, ds.X[0], lambda x: np.float64(2.0))
    assert pred.queried and pred.predicted_label == 2


# --- training -----------------------------------------------------------------

def test_joint_query_rate_responds_to_cost():
    ds = noise_dataset()
    free = train_joint(ds, TeamConfig.accuracy(3, 0.0),
                       TrainConfig(iterations=400, hidden_dims=(8,), seed=3))
    costly = train_joint(ds, TeamConfig.accuracy(3, 2.0),
                         TrainConfig(iterations=400, hidden_dims=(8,), seed=3,
                                     cost_weight=4.0))
    _, q_free, _ = free.decide_batch(ds.X, ds.h)
    _, q_costly, _ = costly.decide_batch(ds.X, ds.h)
    assert q_free.mean() > 0.9
    assert q_costly.mean() < 0.1


def test_pinned_query_probability_reduces_to_solo_training():
    ds = noise_dataset()
    cfg = TrainConfig(iterations=60, hidden_dims=(8,), seed=7)
    solo = train_solo_model(ds, TeamConfig.accuracy(3), cfg)
    joint = train_joint(ds, TeamConfig.accuracy(3), cfg, q_override=0.0)
    assert models_equal(solo, joint.m)


def test_cost_weight_and_query_cost_enter_as_product():
    ds = noise_dataset()
    a = train_joint(ds, TeamConfig.accuracy(3, 0.1),
                    TrainConfig(iterations=60, hidden_dims=(8,), seed=7,
                                cost_weight=2.0))
    b = train_joint(ds, TeamConfig.accuracy(3, 0.2),
                    TrainConfig(iterations=60, hidden_dims=(8,), seed=7,
                                cost_weight=1.0))
    assert models_equal(a.m, b.m) and models_equal(a.q, b.q)


def test_fixed_short_circuit_reuses_solo_model():
    ds = noise_dataset()
    cfg = TrainConfig(iterations=60, hidden_dims=(8,), seed=7)
    solo = train_solo_model(ds, TeamConfig.accuracy(3), cfg)
    f1 = train_fixed(ds, TeamConfig.accuracy(3), cfg)
    f2 = train_fixed(ds, TeamConfig.accuracy(3), cfg, solo_model=solo)
    assert models_equal(f1.m, f2.m) and models_equal(f1.q, f2.q)


def test_training_is_seed_deterministic():
    ds = noise_dataset()
    cfg = TrainConfig(iterations=40, hidden_dims=(8,), seed=5)
    a = train_joint(ds, TeamConfig.accuracy(3, 0.1), cfg)
    b = train_joint(ds, TeamConfig.accuracy(3, 0.1), cfg)
    assert models_equal(a.m, b.m) and models_equal(a.q, b.q)
    c = train_joint(ds, TeamConfig.accuracy(3, 0.1),
                    TrainConfig(iterations=40, hidden_dims=(8,), seed=6))
    assert not models_equal(a.m, c.m)


def test_retargeted_solo_training_learns_the_targets():
    ds = separable_dataset()  # h = (y + 1) % 3, features encode y
    cfg = TrainConfig(iterations=300, hidden_dims=(8,), seed=1)
    model = train_solo_model(ds, TeamConfig.accuracy(3), cfg, targets=ds.h)
    pred = forward_batch(model, ds.X).argmax(axis=1)
    assert (pred == ds.h).mean() > 0.95
    assert (pred == ds.y).mean() < 0.05


def test_fixed_policy_learns_to_query_hard_region():
    # machine can learn y except where the encoding is destroyed
    rng = np.random.default_rng(9)
    y = rng.integers(0, 3, 600)
    X = np.eye(3)[y] + rng.standard_normal((600, 3)) * 0.05
    hard = rng.random(600) < 0.4
    X[hard] = rng.standard_normal((hard.sum(), 3))
    X = np.concatenate([X, hard[:, None].astype(float)], axis=1)
    ds = Dataset(X, y, y.copy(), 3, "regional")
    cfg = TrainConfig(iterations=1500, learning_rate=0.3, hidden_dims=(8,),
                      seed=2)
    system = train_fixed(ds, TeamConfig.accuracy(3, 0.2), cfg)
    _, queried, _ = system.decide_batch(ds.X, ds.h)
    assert queried[hard].mean() > 0.9
    assert queried[~hard].mean() < 0.1


def test_unknown_relaxation_rejected():
    ds = noise_dataset(n=50)
    with pytest.raises(InputError):
        train_joint(ds, TeamConfig.accuracy(3),
                    TrainConfig(iterations=1, hidden_dims=(8,)),
                    relaxation="hard")


def test_direct_relaxation_trains_and_differs_from_mixture():
    ds = noise_dataset(n=200)
    cfg = TrainConfig(iterations=50, hidden_dims=(8,), seed=4)
    mix = train_joint(ds, TeamConfig.accuracy(3, 0.1), cfg)
    direct = train_joint(ds, TeamConfig.accuracy(3, 0.1), cfg,
                         relaxation="direct")
    assert not models_equal(mix.m, direct.m)


def test_divergence_raises_training_error_with_iteration():
    ds = noise_dataset(n=100)
    cfg = TrainConfig(iterations=20, hidden_dims=(8,), learning_rate=1e200,
                      seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingError) as exc:
                train_solo_model(ds, TeamConfig.accuracy(3), cfg)
    assert exc.value.iteration is not None
    assert 0 <= exc.value.iteration < 20


def test_rng_streams_are_independent():
    a = derive_rng(3, 0).random(4)
    b = derive_rng(3, 1).random(4)
    c = derive_rng(3, 0).random(4)
    assert np.array_equal(a, c)
    assert not np.array_equal(a, b)
    assert not np.array_equal(derive_rng(4, 0).random(4), a)
