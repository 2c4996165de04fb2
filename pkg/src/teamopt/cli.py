"""Command-line entry points: generate, sweep, analyze, verify.

One JSON config file drives every command; a few flags (--seed, --out,
--costs, --jobs) override it for quick variations. All randomness flows
from seeds declared in the config, so repeating a command reproduces its
outputs byte for byte. Logs go to stderr; files under --out carry the
machine-readable results.

Exit codes: 0 success, 1 verification failure, 2 config or IO error,
3 partial sweep failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tape
from .calibration import (PlattCalibrator, expected_calibration_error,
                          fit_platt)
from .data import (Dataset, SynthConfig, generate_synthetic, load_csv,
                   save_csv, split)
from .discriminative import (TeamConfig, _mixture_nodes, _solo_ce_loss,
                             train_fixed, train_joint, utility_loss_weights)
from .errors import ConfigError, ParseError, TeamoptError
from .evaluation import (APPROACHES, SPLIT_FRACTIONS, _dump_json, cost_sweep,
                         emit_report, human_error_tree, per_class_analysis,
                         tree_to_dict)
from .numerics import (SIGMOID_HEAD, SOFTMAX_HEAD, TrainConfig, apply_mlp,
                       finite_diff_check, init_mlp)
from .voi import (VoiSystem, CalibratedModel, expected_utility_no_query,
                  expected_utility_query, gamma_all_input, joint_voi_batch,
                  joint_voi_loss_fn, train_fixed_voi, train_joint_voi)

logger = logging.getLogger("teamopt")

DEFAULT_COSTS = (0.0, 0.025, 0.05, 0.075, 0.1, 0.15, 0.2)
DEFAULT_LAMBDA_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)
FORMATS = ("json", "csv", "svg")


@dataclass
class RunConfig:
    """Parsed configuration for one reproducible run."""

    synth: SynthConfig | None = None
    csv_path: str | None = None
    csv_num_classes: int | None = None
    utility: np.ndarray | None = None  # None: identity (accuracy)
    query_cost: float = 0.1
    train: TrainConfig = None
    approaches: tuple = APPROACHES
    costs: tuple = DEFAULT_COSTS
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    seeds: tuple = (0,)
    out: str = "out"
    formats: tuple = FORMATS

    def __post_init__(self):
        if self.train is None:
            self.train = TrainConfig()
        if not self.approaches:
            raise ConfigError("approaches must be nonempty")
        unknown = [a for a in self.approaches if a not in APPROACHES]
        if unknown:
            raise ConfigError(f"unknown approaches {unknown};"
                              f" known: {list(APPROACHES)}")
        if not self.costs or not self.lambda_grid or not self.seeds:
            raise ConfigError("costs, lambda_grid and seeds must be nonempty")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown formats {bad}")
        if self.synth is None and self.csv_path is None:
            self.synth = SynthConfig()
        if self.csv_path is not None and self.csv_num_classes is None:
            raise ConfigError("csv datasets need num_classes")


def _pick(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def config_from_dict(raw: dict) -> RunConfig:
    _pick(raw, {"dataset", "team", "train", "approaches", "costs",
                "lambda_grid", "seeds", "out", "formats"}, "config")
    kwargs = {}
    ds = raw.get("dataset", {})
    _pick(ds, {"synthetic", "csv", "num_classes"}, "dataset")
    if "synthetic" in ds and "csv" in ds:
        raise ConfigError("dataset source must be synthetic or csv, not both")
    if "synthetic" in ds:
        try:
            kwargs["synth"] = SynthConfig(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in ds["synthetic"].items()})
        except TypeError as e:
            raise ConfigError(f"bad synthetic config: {e}") from e
    if "csv" in ds:
        kwargs["csv_path"] = str(ds["csv"])
        kwargs["csv_num_classes"] = ds.get("num_classes")
    team = raw.get("team", {})
    _pick(team, {"utility", "query_cost"}, "team")
    if "utility" in team:
        kwargs["utility"] = np.asarray(team["utility"], dtype=np.float64)
    if "query_cost" in team:
        kwargs["query_cost"] = float(team["query_cost"])
    if "train" in raw:
        try:
            kwargs["train"] = TrainConfig(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in raw["train"].items()})
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from e
    for key, cast in (("approaches", str), ("costs", float),
                      ("lambda_grid", float), ("seeds", int),
                      ("formats", str)):
        if key in raw:
            kwargs[key] = tuple(cast(v) for v in raw[key])
    if "out" in raw:
        kwargs["out"] = str(raw["out"])
    return RunConfig(**kwargs)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        config = replace(config, seeds=(args.seed,))
    if getattr(args, "out", None) is not None:
        config = replace(config, out=args.out)
    if getattr(args, "costs", None) is not None:
        try:
            costs = tuple(float(v) for v in args.costs.split(","))
        except ValueError as e:
            raise ConfigError(f"bad --costs value: {e}") from e
        config = replace(config, costs=costs)
    return config


def build_dataset(config: RunConfig) -> Dataset:
    if config.csv_path is not None:
        return load_csv(config.csv_path, config.csv_num_classes)
    return generate_synthetic(config.synth)


def build_team(config: RunConfig, num_classes: int) -> TeamConfig:
    if config.utility is None:
        return TeamConfig.accuracy(num_classes, config.query_cost)
    return TeamConfig(config.utility, config.query_cost)


# --- commands -------------------------------------------------------------

def cmd_generate(config: RunConfig) -> int:
    if config.csv_path is not None:
        raise ConfigError("generate needs a synthetic dataset source")
    dataset = build_dataset(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    save_csv(dataset, path)
    logger.info("wrote %s: n=%d classes=%d features=%d human_error=%.4f",
                path, len(dataset), dataset.num_classes, dataset.feature_dim,
                dataset.human_error_rate())
    return 0


def cmd_sweep(config: RunConfig, jobs: int = 1) -> int:
    dataset = build_dataset(config)
    team = build_team(config, dataset.num_classes)
    results = cost_sweep(dataset, config.approaches, config.costs,
                         config.lambda_grid, config.seeds, team=team,
                         train_cfg=config.train, jobs=jobs)
    files = emit_report(results, config.out, config.formats)
    for f in files:
        logger.info("wrote %s", f)
    failures = [cell for r in results for cell in r.cells
                if cell.error is not None]
    if failures:
        for cell in failures:
            logger.error("failed cell approach=%s seed=%d: %s",
                         cell.approach, cell.seed, cell.error)
        return 3
    return 0


def cmd_analyze(config: RunConfig) -> int:
    trainable = [a for a in config.approaches if a != "human-only"]
    if not trainable:
        raise ConfigError("analyze needs at least one trainable approach")
    dataset = build_dataset(config)
    team = build_team(config, dataset.num_classes)
    cfg = replace(config.train, seed=config.seeds[0])
    tr, _, te = split(dataset, SPLIT_FRACTIONS, cfg.seed)
    systems = {}
    for approach in trainable:
        logger.info("training %s for analysis", approach)
        if approach == "fixed-disc":
            systems[approach] = train_fixed(tr, team, cfg)
        elif approach == "joint-disc":
            systems[approach] = train_joint(tr, team, cfg)
        elif approach == "fixed-voi":
            systems[approach] = train_fixed_voi(tr, team, cfg)
        elif approach == "joint-voi":
            systems[approach] = train_joint_voi(tr, team, cfg)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    table = per_class_analysis(systems, te)
    tree = human_error_tree(te, systems)
    (out / "per_class.json").write_text(_dump_json(table))
    (out / "error_tree.json").write_text(_dump_json(tree_to_dict(tree)))
    logger.info("wrote %s and %s", out / "per_class.json",
                out / "error_tree.json")
    return 0


# --- verification suites ----------------------------------------------------

def _gradcheck_suite(rng: np.random.Generator,
                     inject_fault: bool = False) -> float:
    """Max FD relative error across the three training losses."""
    K, d, hid, B = 3, 4, 5, 6
    team = TeamConfig(np.eye(K) + 0.1 * rng.random((K, K)), 0.07)
    w = utility_loss_weights(team)
    worst = 0.0
    for _ in range(3):
        X = rng.standard_normal((B, d))
        y = rng.integers(0, K, B)
        h = rng.integers(0, K, B)
        eye = np.eye(K)
        m = init_mlp((d, hid, K), SOFTMAX_HEAD, rng, 0.0)
        q = init_mlp((d, hid, 1), SIGMOID_HEAD, rng, 0.0)
        batch_ce = (X, eye[y], w[y], None)
        worst = max(worst, finite_diff_check(
            {"m": m}, batch_ce, lambda p, b: _solo_ce_loss(p["m"], b)))

        def joint_fn(params, batch):
            Xb, oh_h, oh_y, w_y = batch
            probs = tape.softmax(apply_mlp(params["m"], Xb))
            q_node = tape.sigmoid(
                tape.reshape(apply_mlp(params["q"], Xb), (-1,)))
            return _mixture_nodes(q_node, probs, oh_h, oh_y, w_y, team, 1.0)

        worst = max(worst, finite_diff_check(
            {"m": m, "q": q}, (X, eye[h], eye[y], w[y]), joint_fn))

        a_m = init_mlp((d, hid, K), SOFTMAX_HEAD, rng, 0.0)
        b_m = init_mlp((d, hid, K), SOFTMAX_HEAD, rng, 0.0)
        g_m = init_mlp((d + K, hid, K), SOFTMAX_HEAD, rng, 0.0)
        cal = PlattCalibrator.identity(K)
        cfg = TrainConfig(softmax_temperature=0.8, dropout_rate=0.0)
        system = VoiSystem(CalibratedModel(a_m, cal), CalibratedModel(b_m, cal),
                           CalibratedModel(g_m, cal), team, cfg)
        vbatch = joint_voi_batch(system, X, h, y, team)
        worst = max(worst, finite_diff_check(
            {"alpha": a_m, "beta": b_m, "gamma": g_m}, vbatch,
            joint_voi_loss_fn(team, cfg)))
    if inject_fault:
        logger.warning("gradcheck fault injection active")
        worst = max(worst, 1.0)
    return worst


def _voi_oracle_suite(rng: np.random.Generator) -> float:
    """Max deviation of the VOI quantities from brute-force enumeration."""
    worst = 0.0
    for _ in range(300):
        K = int(rng.choice([2, 3, 5]))
        U = rng.uniform(-1.0, 1.0, (K, K))
        c = float(rng.uniform(0.0, 0.5))
        pa = rng.dirichlet(np.ones(K))
        pb = rng.dirichlet(np.ones(K))
        pg = rng.dirichlet(np.ones(K), size=K)
        best, u_nq = expected_utility_no_query(pa, U)
        u_q = expected_utility_query(pb, lambda hh: pg[hh], U, c)
        # independent enumeration over all actions and responses
        ref_nq = max(sum(U[a, yy] * pa[yy] for yy in range(K))
                     for a in range(K))
        ref_q = sum(pb[hh] * max(sum(U[a, yy] * pg[hh, yy]
                                     for yy in range(K)) for a in range(K))
                    for hh in range(K)) - c
        worst = max(worst, abs(u_nq - ref_nq), abs(u_q - ref_q))
        if (u_q > u_nq) != (ref_q > ref_nq):
            return 1.0
        ref_best = int(np.argmax([sum(U[a, yy] * pa[yy] for yy in range(K))
                                  for a in range(K)]))
        if best != ref_best:
            return 1.0
    return worst


def _calibration_suite(rng: np.random.Generator) -> float:
    """ECE of a Platt fit on a synthetic logistic task (2000 samples)."""
    n = 2000
    scores = rng.standard_normal(n) * 2.0
    p_true = 1.0 / (1.0 + np.exp(-(1.5 * scores - 0.3)))
    labels = (rng.random(n) < p_true).astype(np.int64)
    fit = fit_platt(scores, labels)
    p1 = 1.0 / (1.0 + np.exp(-(fit.a * scores + fit.b)))
    preds = np.column_stack([1.0 - p1, p1])
    return expected_calibration_error(preds, labels, bins=10)


def cmd_verify(inject_gradient_fault: bool = False) -> int:
    suites = (
        ("gradcheck", lambda r: _gradcheck_suite(r, inject_gradient_fault),
         1e-4, "max relative error"),
        ("voi-oracle", _voi_oracle_suite, 1e-12, "max abs deviation"),
        ("calibration", _calibration_suite, 0.05, "expected calibration error"),
    )
    failed = []
    for name, fn, threshold, label in suites:
        err = fn(np.random.default_rng(20240915))
        ok = err < threshold
        logger.info("%s: %s = %.3e (threshold %.0e) -> %s", name, label, err,
                    threshold, "pass" if ok else "FAIL")
        if not ok:
            failed.append(name)
    if failed:
        logger.error("verification failed: %s", ", ".join(failed))
        return 1
    logger.info("all verification suites passed")
    return 0


# --- argument parsing -------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the seed list")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--costs", help="override the cost grid, comma-separated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teamopt",
        description="Train and evaluate human-machine team policies")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", help="write a synthetic dataset CSV")
    _add_common(p)
    p = sub.add_parser("sweep", help="run the cost sweep and emit reports")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel sweep cells (default 1, fully serial)")
    p = sub.add_parser("analyze", help="per-class table and human-error tree")
    _add_common(p)
    p = sub.add_parser("verify", help="run embedded property suites")
    p.add_argument("--inject-gradient-fault", action="store_true",
                   help="force a gradcheck failure (harness self-test)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.inject_gradient_fault)
        config = apply_overrides(load_config(args.config), args)
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "sweep":
            return cmd_sweep(config, jobs=args.jobs)
        if args.command == "analyze":
            return cmd_analyze(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ParseError) as e:
        logger.error("%s", e)
        return 2
    except OSError as e:
        logger.error("IO failure: %s", e)
        return 2
    except TeamoptError as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
