"""Team evaluation: metrics, cost sweeps, analyses, and report files.

The headline metric is total loss: utility-weighted classification error
plus query cost times query rate. `cost_sweep` trains the four approaches
over seeds, selects the joint variants' cost weight per cost point on the
validation split, and reports test metrics. Analyses mirror the usual
diagnostics for a human-machine team: per-class error and query tables, a
shallow Gini tree over the human-error event, and a paired t-test between
approaches. Reports are written deterministically so identical inputs
give byte-identical files.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy import stats

from .data import Dataset, split
from .discriminative import (DiscriminativeSystem, TeamConfig,
                             train_fixed, train_joint, train_solo_model)
from .errors import ConfigError, InputError, TeamoptError
from .numerics import TrainConfig, forward_batch
from .voi import (VoiSystem, train_fixed_voi, train_joint_voi,
                  voi_decision_parts)

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.7, 0.15, 0.15)

APPROACHES = ("fixed-disc", "joint-disc", "fixed-voi", "joint-voi",
              "human-only")


# --- metrics -------------------------------------------------------------

def weighted_error(pred_labels: np.ndarray, labels: np.ndarray,
                   utility: np.ndarray) -> float:
    """Mean utility shortfall U[y][y] - U[pred][y]; plain error for identity."""
    U = np.asarray(utility, dtype=np.float64)
    return float((U[labels, labels] - U[pred_labels, labels]).mean())


def team_metrics_arrays(pred_labels: np.ndarray, queried: np.ndarray,
                        labels: np.ndarray, team: TeamConfig) -> dict:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    queried = np.asarray(queried, dtype=bool)
    if not (len(pred_labels) == len(labels) == len(queried)):
        raise InputError("predictions, labels and query flags must align")
    if len(labels) == 0:
        raise InputError("no predictions to score")
    U, c = team.utility, team.query_cost
    err = weighted_error(pred_labels, labels, U)
    query_rate = float(queried.mean())
    mean_utility = float((U[pred_labels, labels] - c * queried).mean())
    return {"total_loss": err + c * query_rate,
            "classification_error": err,
            "mean_utility": mean_utility,
            "query_rate": query_rate}


def team_metrics(predictions, labels, team: TeamConfig) -> dict:
    """Score a list of TeamPrediction against ground truth."""
    if len(predictions) != len(labels):
        raise InputError("predictions and labels must have equal length")
    pred = np.array([p.predicted_label for p in predictions], dtype=np.int64)
    queried = np.array([p.queried for p in predictions], dtype=bool)
    return team_metrics_arrays(pred, queried, labels, team)


def human_only_baseline(dataset: Dataset, team: TeamConfig) -> dict:
    """Always query, output the human response."""
    return team_metrics_arrays(dataset.h, np.ones(len(dataset), dtype=bool),
                               dataset.y, team)


def system_decisions(system, dataset: Dataset, cost: float | None = None
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(machine_labels, team_labels, queried) for either system kind."""
    if isinstance(system, DiscriminativeSystem):
        team_labels, queried, _ = system.decide_batch(dataset.X, dataset.h)
        machine = forward_batch(system.m, dataset.X).argmax(axis=1)
        return machine.astype(np.int64), team_labels, queried
    if isinstance(system, VoiSystem):
        c = system.team.query_cost if cost is None else cost
        best_nq, query, best_by_h = system.decide_batch(dataset.X, c)
        post = best_by_h[np.arange(len(dataset)), dataset.h]
        return best_nq, np.where(query, post, best_nq), query
    raise InputError(f"unsupported system type {type(system).__name__}")


# --- cost sweep ----------------------------------------------------------

@dataclass
class SweepCell:
    """One (approach, seed) unit of work; rows are per-cost test metrics."""

    approach: str
    seed: int
    rows: list  # (cost, total_loss, classification_error, query_rate, lam)
    error: str | None = None


@dataclass
class SweepResult:
    approach: str
    records: list  # per-cost dicts, seed-averaged
    seeds: list
    dataset: str
    cells: list = field(default_factory=list)

    def as_json_dict(self) -> dict:
        return {"approach": self.approach, "records": self.records,
                "seeds": list(self.seeds), "dataset": self.dataset}


def _disc_rates(system: DiscriminativeSystem, ds: Dataset
                ) -> tuple[float, float]:
    labels, queried, _ = system.decide_batch(ds.X, ds.h)
    return (weighted_error(labels, ds.y, system.team.utility),
            float(queried.mean()))


def _voi_rates_fn(system: VoiSystem, ds: Dataset):
    """Closure over precomputed decision parts; cheap at every cost."""
    parts = voi_decision_parts(system, ds.X)
    post = parts.best_by_h[np.arange(len(ds)), ds.h]
    U = system.team.utility

    def at_cost(c: float) -> tuple[float, float]:
        query = parts.u_q_base - c > parts.u_nq
        labels = np.where(query, post, parts.best_no_query)
        return weighted_error(labels, ds.y, U), float(query.mean())

    return at_cost


def _cell_human_only(dataset, seed, costs, lam_grid, team, cfg):
    _, _, te = split(dataset, SPLIT_FRACTIONS, seed)
    err = weighted_error(te.h, te.y, team.utility)
    return [(c, err + c, err, 1.0, None) for c in costs]


def _cell_fixed_disc(dataset, seed, costs, lam_grid, team, cfg):
    tr, _, te = split(dataset, SPLIT_FRACTIONS, seed)
    cfg_s = replace(cfg, seed=seed)
    solo = train_solo_model(tr, team, cfg_s)
    rows = []
    for c in costs:
        system = train_fixed(tr, team.with_cost(c), cfg_s, solo_model=solo)
        err, qrate = _disc_rates(system, te)
        rows.append((c, err + c * qrate, err, qrate, cfg_s.cost_weight))
    return rows


def _cell_joint_disc(dataset, seed, costs, lam_grid, team, cfg):
    tr, va, te = split(dataset, SPLIT_FRACTIONS, seed)
    c_ref = float(np.median(costs))
    variants = []
    for lam in lam_grid:
        cfg_l = replace(cfg, seed=seed, cost_weight=lam)
        system = train_joint(tr, team.with_cost(c_ref), cfg_l)
        variants.append((lam, _disc_rates(system, va), _disc_rates(system, te)))
    rows = []
    for c in costs:
        lam, _, (err, qrate) = min(
            variants, key=lambda v: v[1][0] + c * v[1][1])
        rows.append((c, err + c * qrate, err, qrate, lam))
    return rows


def _cell_fixed_voi(dataset, seed, costs, lam_grid, team, cfg):
    tr, _, te = split(dataset, SPLIT_FRACTIONS, seed)
    system = train_fixed_voi(tr, team, replace(cfg, seed=seed))
    at_cost = _voi_rates_fn(system, te)
    rows = []
    for c in costs:
        err, qrate = at_cost(c)
        rows.append((c, err + c * qrate, err, qrate, None))
    return rows


def _cell_joint_voi(dataset, seed, costs, lam_grid, team, cfg):
    tr, va, te = split(dataset, SPLIT_FRACTIONS, seed)
    cfg_s = replace(cfg, seed=seed)
    warm = train_fixed_voi(tr, team, cfg_s)
    c_ref = float(np.median(costs))
    variants = []
    for lam in lam_grid:
        cfg_l = replace(cfg_s, cost_weight=lam)
        system = train_joint_voi(tr, team.with_cost(c_ref), cfg_l,
                                 warm_start=warm)
        variants.append((lam, _voi_rates_fn(system, va),
                         _voi_rates_fn(system, te)))
    rows = []
    for c in costs:
        scored = [(lam, va_fn(c), te_fn(c)) for lam, va_fn, te_fn in variants]
        lam, _, (err, qrate) = min(scored, key=lambda v: v[1][0] + c * v[1][1])
        rows.append((c, err + c * qrate, err, qrate, lam))
    return rows


_CELL_RUNNERS = {"human-only": _cell_human_only,
                 "fixed-disc": _cell_fixed_disc,
                 "joint-disc": _cell_joint_disc,
                 "fixed-voi": _cell_fixed_voi,
                 "joint-voi": _cell_joint_voi}


def _run_cell(args) -> SweepCell:
    dataset, approach, seed, costs, lam_grid, team, cfg = args
    try:
        rows = _CELL_RUNNERS[approach](dataset, seed, costs, lam_grid,
                                       team, cfg)
        return SweepCell(approach, seed, rows)
    except Exception as e:  # failures recorded per cell, sweep continues
        return SweepCell(approach, seed, [], f"{type(e).__name__}: {e}")


def _lambda_mode(values) -> float | None:
    present = [v for v in values if v is not None]
    if not present:
        return None
    counts = Counter(present)
    return max(counts.items(), key=lambda kv: (kv[1], -kv[0]))[0]


def cost_sweep(dataset: Dataset, approaches, costs, lambda_grid, seeds,
               team: TeamConfig | None = None,
               train_cfg: TrainConfig | None = None,
               jobs: int = 1) -> list[SweepResult]:
    """Train and score every approach across seeds and query costs.

    Fixed approaches rebuild their query mechanism per cost; joint
    approaches train once per cost weight in `lambda_grid` at the median
    cost and each cost point keeps the variant with the lowest validation
    total loss. Per-seed failures are logged and skipped in the averages.
    """
    names = sorted(set(approaches))
    unknown = [a for a in names if a not in _CELL_RUNNERS]
    if unknown:
        raise ConfigError(f"unknown approaches: {unknown}")
    costs = sorted(set(float(c) for c in costs))
    lam_grid = sorted(set(float(v) for v in lambda_grid))
    seeds = [int(s) for s in seeds]
    if not (names and costs and lam_grid and seeds):
        raise ConfigError("approaches, costs, lambda grid and seeds must be"
                          " nonempty")
    team = team or TeamConfig.accuracy(dataset.num_classes)
    cfg = train_cfg or TrainConfig()
    work = [(dataset, a, s, costs, lam_grid, team, cfg)
            for a in names for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, work))
    else:
        cells = [_run_cell(item) for item in work]

    results = []
    by_approach = {a: [c for c in cells if c.approach == a] for a in names}
    for approach in names:
        good = [c for c in by_approach[approach] if c.error is None]
        for cell in by_approach[approach]:
            if cell.error is not None:
                logger.error("sweep cell failed: approach=%s seed=%d: %s",
                             cell.approach, cell.seed, cell.error)
        records = []
        if good:
            for i, c in enumerate(costs):
                rows = [cell.rows[i] for cell in good]
                records.append({
                    "c": c,
                    "total_loss": float(np.mean([r[1] for r in rows])),
                    "classification_error":
                        float(np.mean([r[2] for r in rows])),
                    "query_rate": float(np.mean([r[3] for r in rows])),
                    "selected_lambda": _lambda_mode([r[4] for r in rows])})
        results.append(SweepResult(approach, records, seeds, dataset.name,
                                   by_approach[approach]))
    return results


# --- analyses ------------------------------------------------------------

def per_class_analysis(systems: dict, dataset: Dataset) -> list:
    """Per-class machine error, team error and query fraction per system."""
    outputs = {name: system_decisions(s, dataset)
               for name, s in sorted(systems.items())}
    rows = []
    for k in range(dataset.num_classes):
        mask = dataset.y == k
        count = int(mask.sum())
        entry = {"class": k, "count": count, "systems": {}}
        for name, (machine, team_lbl, queried) in outputs.items():
            if count == 0:  # class absent: flagged empty row, not an error
                entry["systems"][name] = {"machine_error": None,
                                          "team_error": None,
                                          "query_fraction": None}
            else:
                entry["systems"][name] = {
                    "machine_error": float((machine[mask] != k).mean()),
                    "team_error": float((team_lbl[mask] != k).mean()),
                    "query_fraction": float(queried[mask].mean())}
        rows.append(entry)
    return rows


@dataclass
class ErrorRegionTree:
    """Axis-aligned threshold tree over the human-error event h != y.

    Interior nodes route x[feature_index] <= threshold to `left`; leaves
    carry `leaf_stats`: instance fraction, human error rate, and each
    named system's machine error rate on the leaf.
    """

    feature_index: int | None = None
    threshold: float | None = None
    left: "ErrorRegionTree | None" = None
    right: "ErrorRegionTree | None" = None
    leaf_stats: dict | None = None

    @property
    def is_leaf(self) -> bool:
        return self.leaf_stats is not None

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def leaf_of(self, x: np.ndarray) -> "ErrorRegionTree":
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature_index] <= node.threshold \
                else node.right
        return node


def _best_split(X: np.ndarray, target: np.ndarray, idx: np.ndarray,
                min_count: int) -> tuple[int, float] | None:
    """Gini-impurity split search; ties favor low feature, low threshold."""
    t = target[idx].astype(np.float64)
    m = len(idx)
    total_pos = t.sum()
    parent = m * 2.0 * (total_pos / m) * (1.0 - total_pos / m)
    best = (parent - 1e-12, None, None)
    for j in range(X.shape[1]):
        xs = X[idx, j]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        pos_l = np.cumsum(t[order])[:-1]
        n_l = np.arange(1, m, dtype=np.float64)
        n_r = m - n_l
        pos_r = total_pos - pos_l
        score = (n_l * 2.0 * (pos_l / n_l) * (1.0 - pos_l / n_l)
                 + n_r * 2.0 * (pos_r / n_r) * (1.0 - pos_r / n_r))
        valid = ((xs_sorted[1:] > xs_sorted[:-1]) & (n_l >= min_count)
                 & (n_r >= min_count))
        if not valid.any():
            continue
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        if score[i] < best[0]:
            best = (score[i], j, (xs_sorted[i] + xs_sorted[i + 1]) / 2.0)
    if best[1] is None:
        return None
    return best[1], float(best[2])


def human_error_tree(dataset: Dataset, systems: dict | None = None,
                     max_depth: int = 2, min_leaf_fraction: float = 0.05
                     ) -> ErrorRegionTree:
    """Greedy CART-style tree predicting where the human errs."""
    if max_depth < 1:
        raise ConfigError("max_depth must be >= 1")
    if not 0.0 <= min_leaf_fraction < 1.0:
        raise ConfigError("min_leaf_fraction must be in [0, 1)")
    systems = systems or {}
    n = len(dataset)
    target = dataset.h != dataset.y
    machine = {name: system_decisions(s, dataset)[0]
               for name, s in sorted(systems.items())}
    min_count = max(1, int(np.floor(min_leaf_fraction * n)))

    def leaf(idx: np.ndarray) -> ErrorRegionTree:
        stats_d = {"fraction": len(idx) / n,
                   "count": int(len(idx)),
                   "human_error_rate": float(target[idx].mean()),
                   "machine_error": {
                       name: float((lbl[idx] != dataset.y[idx]).mean())
                       for name, lbl in machine.items()}}
        return ErrorRegionTree(leaf_stats=stats_d)

    def grow(idx: np.ndarray, depth: int) -> ErrorRegionTree:
        if depth == max_depth or len(idx) < 2 * min_count \
                or target[idx].all() or not target[idx].any():
            return leaf(idx)
        found = _best_split(dataset.X, target, idx, min_count)
        if found is None:
            return leaf(idx)
        j, theta = found
        goes_left = dataset.X[idx, j] <= theta
        return ErrorRegionTree(j, theta,
                               grow(idx[goes_left], depth + 1),
                               grow(idx[~goes_left], depth + 1))

    return grow(np.arange(n), 0)


def tree_to_dict(tree: ErrorRegionTree) -> dict:
    if tree.is_leaf:
        return {"feature_index": None, "threshold": None, "left": None,
                "right": None, "leaf_stats": tree.leaf_stats}
    return {"feature_index": tree.feature_index, "threshold": tree.threshold,
            "left": tree_to_dict(tree.left), "right": tree_to_dict(tree.right),
            "leaf_stats": None}


class SignificanceResult(float):
    """p-value that also carries the t statistic and a degeneracy flag."""

    t_statistic: float
    degenerate: bool

    def __new__(cls, p: float, t_statistic: float, degenerate: bool):
        obj = super().__new__(cls, p)
        obj.t_statistic = t_statistic
        obj.degenerate = degenerate
        return obj

    @property
    def p_value(self) -> float:
        return float(self)


def paired_significance(losses_a, losses_b) -> SignificanceResult:
    """Two-sided paired Student t-test on loss samples.

    Zero-variance differences (e.g. identical samples) return p=1 with the
    degenerate flag set rather than erroring.
    """
    a = np.asarray(losses_a, dtype=np.float64)
    b = np.asarray(losses_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("paired samples must be equal-length vectors")
    if len(a) < 2:
        raise InputError("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return SignificanceResult(1.0, 0.0, True)
    t = d.mean() / (sd / np.sqrt(len(d)))
    p = 2.0 * stats.t.sf(abs(t), len(d) - 1)
    return SignificanceResult(float(p), float(t), False)


# --- report emission -------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def render_loss_svg(results, width: int = 640, height: int = 420) -> str:
    """Hand-rolled line plot of mean total loss vs query cost."""
    ml, mr, mt, mb = 62, 20, 34, 48
    series = [(r.approach if hasattr(r, "approach") else r["approach"],
               [(rec["c"], rec["total_loss"])
                for rec in (r.records if hasattr(r, "records")
                            else r["records"])])
              for r in results]
    series = [(name, pts) for name, pts in series if pts]
    xs = [p[0] for _, pts in series for p in pts]
    ys = [p[1] for _, pts in series for p in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    y0 = min(0.0, min(ys)) if ys else 0.0
    y1 = max(ys) * 1.08 if ys and max(ys) > 0 else 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}"'
             f' height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             '<g font-family="sans-serif" font-size="11" fill="#333">']
    ax = ('stroke="#333" stroke-width="1"')
    parts.append(f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}"'
                 f' y2="{height - mb}" {ax}/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}"'
                 f' {ax}/>')
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        xp, yp = _fmt(px(xv)), _fmt(py(yv))
        parts.append(f'<line x1="{xp}" y1="{height - mb}" x2="{xp}"'
                     f' y2="{height - mb + 4}" {ax}/>')
        parts.append(f'<text x="{xp}" y="{height - mb + 16}"'
                     f' text-anchor="middle">{_fmt(xv)}</text>')
        parts.append(f'<line x1="{ml - 4}" y1="{yp}" x2="{ml}" y2="{yp}"'
                     f' {ax}/>')
        parts.append(f'<text x="{ml - 7}" y="{yp}" text-anchor="end"'
                     f' dominant-baseline="middle">{_fmt(yv)}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2}" y="{height - 10}"'
                 f' text-anchor="middle">query cost</text>')
    parts.append(f'<text x="14" y="{(mt + height - mb) / 2}"'
                 f' text-anchor="middle" transform="rotate(-90 14'
                 f' {(mt + height - mb) / 2})">total loss</text>')
    for k, (name, pts) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        dash = ' stroke-dasharray="6,4"' \
            if name.startswith(("fixed", "human")) else ""
        coords = " ".join(f"{_fmt(px(c))},{_fmt(py(v))}" for c, v in pts)
        parts.append(f'<polyline points="{coords}" fill="none"'
                     f' stroke="{color}" stroke-width="1.8"{dash}/>')
        for c, v in pts:
            parts.append(f'<circle cx="{_fmt(px(c))}" cy="{_fmt(py(v))}"'
                         f' r="2.6" fill="{color}"/>')
        ly = mt + 8 + 15 * k
        lx = width - mr - 150
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}"'
                     f' stroke="{color}" stroke-width="1.8"{dash}/>')
        parts.append(f'<text x="{lx + 30}" y="{ly + 4}">{escape(name)}</text>')
    parts.append('</g>')
    parts.append('</svg>')
    return "\n".join(parts) + "\n"


def _dump_json(payload) -> str:
    return json.dumps(payload, indent=2) + "\n"


def _write(path: Path, text: str) -> str:
    try:
        path.write_text(text)
    except OSError as e:
        raise TeamoptError(f"failed writing {path}: {e}") from e
    return str(path)


def sweep_csv_text(results) -> str:
    header = ("approach,cost,total_loss,classification_error,query_rate,"
              "selected_lambda,seed")
    lines = [header]
    for r in results:
        cells = getattr(r, "cells", None) or []
        for cell in cells:
            if cell.error is not None:
                continue
            for cost, total, err, qrate, lam in cell.rows:
                lam_s = "" if lam is None else repr(float(lam))
                lines.append(f"{r.approach},{cost!r},{total!r},{err!r},"
                             f"{qrate!r},{lam_s},{cell.seed}")
    return "\n".join(lines) + "\n"


def emit_report(results, out_dir, formats=("json", "csv", "svg")) -> list[str]:
    """Write sweep.json / sweep.csv / loss_vs_cost.svg; returns paths.

    JSON holds the seed-averaged records (and survives a load/re-emit
    round trip byte-identically); the CSV carries per-seed rows and so
    needs in-memory results, not reloaded JSON.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise TeamoptError(f"cannot create output dir {out}: {e}") from e
    written = []
    if "json" in formats:
        payload = [r.as_json_dict() if hasattr(r, "as_json_dict") else r
                   for r in results]
        written.append(_write(out / "sweep.json", _dump_json(payload)))
    if "csv" in formats:
        written.append(_write(out / "sweep.csv", sweep_csv_text(results)))
    if "svg" in formats:
        written.append(_write(out / "loss_vs_cost.svg",
                              render_loss_svg(results)))
    return written
