"""Scoring localization runs against ground truth."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import SourceParams


@dataclass
class MatchReport:
    pairs: List[Tuple[int, int, float]]  # (estimate index, truth index, distance cm)
    unmatched_estimates: List[int]
    unmatched_truths: List[int]
    match_radius: float
    n_estimates: int = 0
    n_truths: int = 0


@dataclass
class RunSummary:
    precision: float
    recall: float
    f1: float
    eps_l: Optional[float]  # raw: cm and uCi combined
    eps_l_norm: Optional[float] = None  # m and (strength / strength_scale)
    iterations: float = 1.0
    time_steps: int = 0
    wall_seconds: float = 0.0


def _positions(sources: Sequence) -> np.ndarray:
    pts = [s.position if isinstance(s, SourceParams) else s.params.position for s in sources]
    return np.array(pts, dtype=float).reshape(len(pts), -1)


def _params(s) -> SourceParams:
    return s if isinstance(s, SourceParams) else s.params


def default_match_radius(extent) -> float:
    """5% of the longest environment axis."""
    return 0.05 * float(np.max(extent))


def match_sources(estimates: Sequence, truth: Sequence, match_radius: float) -> MatchReport:
    """Optimal one-to-one matching of estimates to truths by position.

    Among all matchings that use only pairs within ``match_radius``, pick one
    with the most pairs and, among those, the least total distance.
    """
    if not match_radius > 0:
        raise ValueError("match_radius must be > 0")
    ne, nt = len(estimates), len(truth)
    pairs: List[Tuple[int, int, float]] = []
    if ne and nt:
        d = np.linalg.norm(_positions(estimates)[:, None, :] - _positions(truth)[None, :, :], axis=2)
        feasible = d <= match_radius
        # any feasible pair beats every infeasible one, so cardinality comes first
        big = 1.0 + 2.0 * d[feasible].sum() if feasible.any() else 1.0
        cost = np.where(feasible, d, big)
        rows, cols = linear_sum_assignment(cost)
        pairs = [(int(r), int(c), float(d[r, c])) for r, c in zip(rows, cols) if feasible[r, c]]
    used_e = {p[0] for p in pairs}
    used_t = {p[1] for p in pairs}
    return MatchReport(
        pairs,
        [i for i in range(ne) if i not in used_e],
        [j for j in range(nt) if j not in used_t],
        match_radius,
        ne,
        nt,
    )


def prf1(report: MatchReport) -> Tuple[float, float, float]:
    ne, nt, k = report.n_estimates, report.n_truths, len(report.pairs)
    if ne == 0 and nt == 0:
        return 1.0, 1.0, 1.0
    p = k / ne if ne else 0.0
    r = k / nt if nt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def localization_error(
    report: MatchReport,
    estimates: Sequence,
    truth: Sequence,
    position_scale: float = 1.0,
    strength_scale: float = 1.0,
) -> Optional[float]:
    """Mean over matched pairs of ``sqrt(dpos^2 + dstr^2)``; None without pairs.

    Position and strength differences are divided by their scales first
    (1 and 1 gives raw cm/uCi units).
    """
    if not report.pairs:
        return None
    errs = []
    for i, j, _ in report.pairs:
        e, t = _params(estimates[i]), _params(truth[j])
        dp = np.linalg.norm(np.subtract(e.position, t.position)) / position_scale
        ds = (e.strength - t.strength) / strength_scale
        errs.append(np.hypot(dp, ds))
    return float(np.mean(errs))


def summarize(
    estimates: Sequence,
    truth: Sequence,
    match_radius: float,
    iterations: float = 1,
    time_steps: int = 0,
    wall_seconds: float = 0.0,
    norm_scales: Tuple[float, float] = (100.0, 100.0),
) -> RunSummary:
    """Score one run.  ``norm_scales`` (cm, uCi) define the normalized error."""
    rep = match_sources(estimates, truth, match_radius)
    p, r, f = prf1(rep)
    return RunSummary(
        p,
        r,
        f,
        localization_error(rep, estimates, truth),
        localization_error(rep, estimates, truth, *norm_scales),
        iterations,
        time_steps,
        wall_seconds,
    )


_FIELDS = ("precision", "recall", "f1", "eps_l", "eps_l_norm", "iterations", "time_steps", "wall_seconds")


def aggregate_runs(summaries: Sequence[RunSummary]) -> Dict[str, Optional[float]]:
    """Mean and standard deviation of every summary field.

    Error fields average over the runs where they are defined and are None
    when no run has one.  Keys are ``<field>`` and ``<field>_std`` plus
    ``runs``.
    """
    if not summaries:
        raise ValueError("need at least one run summary")
    out: Dict[str, Optional[float]] = {"runs": len(summaries)}
    for f in _FIELDS:
        vals = [getattr(s, f) for s in summaries if getattr(s, f) is not None]
        if vals:
            out[f] = float(np.mean(vals))
            out[f + "_std"] = float(np.std(vals))
        else:
            out[f] = out[f + "_std"] = None
    return out


TABLE_COLUMNS = ("config", "time_steps", "mean_iterations", "loc_error", "precision", "recall", "f1")


def table_row(config: str, agg: Dict[str, Optional[float]], loc_key: str = "eps_l_norm") -> Dict[str, object]:
    def fmt(v, nd=4):
        return "" if v is None else f"{v:.{nd}f}"

    return {
        "config": config,
        "time_steps": fmt(agg["time_steps"], 2),
        "mean_iterations": fmt(agg["iterations"], 3),
        "loc_error": fmt(agg[loc_key]),
        "precision": fmt(agg["precision"]),
        "recall": fmt(agg["recall"]),
        "f1": fmt(agg["f1"]),
    }


def write_table(rows: Sequence[Dict[str, object]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
