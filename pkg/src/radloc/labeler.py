"""Outer loop: score candidates, accept confident ones, rerun on residual mass.

Accepted sources are folded into every later likelihood, so each rerun only
has to explain what is still unexplained.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .estimate import (
    DEFAULT_BANDWIDTH,
    DEFAULT_MERGE_DISTANCE,
    DEFAULT_MIN_SUPPORT,
    CandidateSource,
    cluster,
    extract_candidates,
)
from .filter import (
    FilterConfig,
    ParticleDump,
    ResolvedSource,
    checksum,
    default_bg_thresh,
    init_particles,
    run_inner_loop,
)
from .model import Measurement, expected_intensity, log_poisson_likelihood_normalized
from .scenario import PriorPointSet, Scenario, cell_pitch, generate_measurements, stream

_TINY = np.finfo(float).tiny


@dataclass
class LabelConfig:
    k: int = 3
    omegas: Optional[Sequence[float]] = None  # None -> uniform 1/k
    confidence_thresh: float = 0.80
    source_thresh: Optional[float] = None  # uCi; None -> 5% of the strength window top
    bg_thresh: Optional[float] = None  # None -> 4 sqrt(sum of expected background)
    max_iterations: int = 3
    warm_start: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.omegas is None:
            self.omegas = tuple([1.0 / self.k] * self.k)
        if len(self.omegas) != self.k:
            raise ValueError(f"need {self.k} omegas, got {len(self.omegas)}")
        if abs(sum(self.omegas) - 1.0) > 1e-12 or min(self.omegas) < 0:
            raise ValueError("omegas must be nonnegative and sum to 1")
        if not 0 < self.confidence_thresh < 1:
            raise ValueError("confidence_thresh must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class ClusterConfig:
    backend: str = "meanshift"
    bandwidth: float = DEFAULT_BANDWIDTH
    merge_distance: float = DEFAULT_MERGE_DISTANCE
    min_support: float = DEFAULT_MIN_SUPPORT


@dataclass
class IterationTrace:
    iteration: int
    time_steps: int
    candidates: List[CandidateSource]
    accepted: List[ResolvedSource]
    checksum: float
    seconds: Dict[str, float]


@dataclass
class LocalizationResult:
    resolved: List[ResolvedSource]
    iterations_used: int
    checksum_history: List[float]
    traces: List[IterationTrace]
    terminated_by: str  # "checksum" | "max_iterations"
    time_steps: int = 0
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        def src(p):
            d = {"position": list(p.position), "strength_uCi": p.strength}
            if p.dipole is not None:
                d["dipole"] = list(p.dipole)
            return d

        return {
            "resolved": [
                {**src(r.params), "confidence": r.confidence, "iteration": r.iteration_found}
                for r in self.resolved
            ],
            "checksum_history": list(self.checksum_history),
            "iterations_used": self.iterations_used,
            "time_steps": self.time_steps,
            "terminated_by": self.terminated_by,
            "iterations": [
                {
                    "iteration": t.iteration,
                    "time_steps": t.time_steps,
                    "checksum": t.checksum,
                    "candidates": [
                        {**src(c.params), "support": c.support, "confidence": c.confidence}
                        for c in t.candidates
                    ],
                    "accepted": len(t.accepted),
                    "seconds": t.seconds,
                }
                for t in self.traces
            ],
            "wall_seconds": self.wall_seconds,
        }

    def to_json(self, timings: bool = True) -> str:
        d = self.to_dict()
        if not timings:
            d.pop("wall_seconds")
            for it in d["iterations"]:
                it.pop("seconds")
        return json.dumps(d, indent=2)


def default_source_thresh(fcfg: FilterConfig) -> float:
    """Strength floor for candidates: 5% of the top of the strength window."""
    return 0.05 * fcfg.strength_window[1]


def nearest_sensors(position, measurements: Sequence[Measurement], k: int) -> List[Measurement]:
    """The ``k`` readings closest to ``position``, ties kept in trajectory order."""
    pts = np.array([m.pose.position for m in measurements])
    d2 = np.sum((pts - np.asarray(position)) ** 2, axis=1)
    return [measurements[i] for i in np.argsort(d2, kind="stable")[:k]]


def confidence(
    candidate: CandidateSource,
    measurements: Sequence[Measurement],
    resolved: Sequence[ResolvedSource],
    cfg: LabelConfig,
) -> float:
    """Weighted normalized Poisson likelihood at the ``k`` nearest sensors."""
    if cfg.k > len(measurements):
        raise ValueError(f"k={cfg.k} exceeds the {len(measurements)} available readings")
    srcs = [candidate.params] + [r.params for r in resolved]
    total = 0.0
    for w, m in zip(cfg.omegas, nearest_sensors(candidate.params.position, measurements, cfg.k)):
        lam = expected_intensity(m.pose, srcs)
        if lam > 0:
            p = float(np.exp(log_poisson_likelihood_normalized(m.count, lam)))
        else:
            p = 1.0 if m.count == 0 else 0.0
        total += w * max(p, _TINY)
    return min(total, 1.0)


class Labeling(NamedTuple):
    accepted: List[ResolvedSource]
    rerun: bool
    checksum: float


def label_sources(
    candidates: Sequence[CandidateSource],
    measurements: Sequence[Measurement],
    resolved: List[ResolvedSource],
    cfg: LabelConfig,
    iteration: int = 1,
    source_thresh: float = 0.0,
    bg_thresh: Optional[float] = None,
) -> Labeling:
    """Accept strong, confident candidates, then decide whether to rerun.

    Candidates are visited by support; each acceptance is appended to
    ``resolved`` immediately so later candidates are scored against it.
    Every candidate's ``confidence`` field is filled in when scored.
    """
    if cfg.source_thresh is not None:
        source_thresh = cfg.source_thresh
    if bg_thresh is None:
        bg_thresh = cfg.bg_thresh if cfg.bg_thresh is not None else default_bg_thresh(measurements)
    accepted = []
    for cand in sorted(candidates, key=lambda c: -c.support):
        if cand.params.strength < source_thresh:
            continue
        cand.confidence = confidence(cand, measurements, resolved, cfg)
        if cand.confidence >= cfg.confidence_thresh:
            r = ResolvedSource(cand.params, cand.confidence, iteration)
            resolved.append(r)
            accepted.append(r)
    cs = checksum(measurements, resolved)
    return Labeling(accepted, cs >= bg_thresh, cs)


def sweep_source(
    scn: Scenario, measurements: Optional[Sequence[Measurement]] = None, freeze: bool = False
) -> Callable[[int], List[Measurement]]:
    """Map a time step to its sweep.

    Without recorded ``measurements`` every step is a fresh simulated
    re-flight; recorded data are grouped by ``time_step`` and cycled.
    """
    if measurements is None:
        cache: Dict[int, List[Measurement]] = {}

        def simulate(t: int) -> List[Measurement]:
            if t not in cache:
                cache[t] = generate_measurements(scn, t, freeze)
            return cache[t]

        return simulate
    groups: Dict[int, List[Measurement]] = {}
    for m in measurements:
        groups.setdefault(m.time_step, []).append(m)
    keys = sorted(groups)

    def replay(t: int) -> List[Measurement]:
        return groups[keys[t % len(keys)]]

    return replay


def run_outer_loop(
    scn: Scenario,
    fcfg: FilterConfig,
    lcfg: LabelConfig,
    ccfg: Optional[ClusterConfig] = None,
    rng: Optional[np.random.Generator] = None,
    prior: Optional[PriorPointSet] = None,
    measurements: Optional[Sequence[Measurement]] = None,
    freeze: bool = False,
    dump: Optional[ParticleDump] = None,
) -> LocalizationResult:
    """Filter, cluster, label and repeat until the checksum says stop."""
    t_start = time.perf_counter()
    ccfg = ccfg or ClusterConfig()
    env = scn.environment
    fcfg = fcfg.resolve(env, cell_pitch(scn))
    rng = stream(scn.seed, 0xF1) if rng is None else rng
    sweeps = sweep_source(scn, measurements, freeze)
    source_thresh = default_source_thresh(fcfg)

    resolved: List[ResolvedSource] = []
    history, traces = [], []
    t = 0
    particles = None
    terminated_by = "max_iterations"
    for it in range(1, lcfg.max_iterations + 1):
        secs = {}
        t0 = time.perf_counter()
        if particles is None or not lcfg.warm_start:
            particles = init_particles(env, fcfg, prior, rng)
        inner = run_inner_loop(particles, sweeps, resolved, fcfg, rng, first_step=t, dump=dump)
        t += fcfg.steps_per_estimate
        sweep = inner.last_sweep or list(sweeps(t))
        t1 = time.perf_counter()
        clusters = cluster(
            particles, ccfg.backend, bandwidth=ccfg.bandwidth, merge_distance=ccfg.merge_distance
        )
        cands = extract_candidates(clusters, ccfg.min_support)
        t2 = time.perf_counter()
        lab = label_sources(cands, sweep, resolved, lcfg, it, source_thresh)
        t3 = time.perf_counter()
        secs = {"filter": t1 - t0, "cluster": t2 - t1, "label": t3 - t2}
        history.append(lab.checksum)
        traces.append(IterationTrace(it, t, cands, lab.accepted, lab.checksum, secs))
        if not lab.rerun:
            terminated_by = "checksum"
            break
    return LocalizationResult(
        resolved, len(traces), history, traces, terminated_by, t, time.perf_counter() - t_start
    )
