"""Inner loop: selective Bayesian reweighting and local importance resampling.

A particle is one hypothesized source ``[pos..., strength(, dipole...)]``.
Every reading only touches the particles inside its fusion range, and
resampling is confined to that same subset, so several sources can keep
their own particle populations side by side.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .model import (
    UCI_TO_CPS,
    Measurement,
    SourceParams,
    batch_flux,
    expected_intensity,
    log_poisson_likelihood_normalized,
)
from .scenario import Environment, PriorPointSet


def logsumexp(a: np.ndarray) -> float:
    """log(sum(exp(a))) for a 1-D array; scipy's version costs more than the math here."""
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


# default fusion radius in cell pitches: the nearest ring of poses plus the diagonals
FUSION_PITCHES = 1.5
# layered 3-D sweeps add the poses above and below, whose diagonals sit at sqrt(3) pitches
FUSION_PITCHES_3D = 2.0


@dataclass
class FilterConfig:
    n_particles: int = 1000
    fusion_range_cm: Optional[float] = None  # None -> FUSION_PITCHES(_3D) x trajectory cell pitch
    jitter_sigmas: Optional[Sequence[float]] = None  # None -> jitter_fraction of each range
    jitter_fraction: float = 0.01
    replace_fraction: float = 0.05
    strength_window: tuple = (0.0, 100.0)
    steps_per_estimate: int = 3
    dipole: bool = False
    dipole_window: float = 2000.0  # |component| bound for initial dipoles, uCi*cm
    log_floor: float = -50.0
    prior_sigma_cm: Optional[float] = None  # None -> position jitter
    per_sweep: bool = False
    score_sweeps: int = 1  # trailing sweeps scored into ParticleSet.fit; 0 disables

    def __post_init__(self):
        if self.n_particles < 100:
            raise ValueError(f"n_particles must be >= 100, got {self.n_particles}")
        if self.fusion_range_cm is not None and not self.fusion_range_cm > 0:
            raise ValueError("fusion_range_cm must be > 0")
        if not 0.0 <= self.replace_fraction <= 0.2:
            raise ValueError("replace_fraction must lie in [0, 0.2]")
        lo, hi = self.strength_window
        if not 0 <= lo < hi:
            raise ValueError(f"bad strength window {self.strength_window}")
        if self.steps_per_estimate < 0:
            raise ValueError("steps_per_estimate must be >= 0")

    def n_params(self, dim: int) -> int:
        return dim + 1 + (dim if self.dipole else 0)

    def resolve(self, env: Environment, pitch: float) -> "FilterConfig":
        """Fill in the scale-dependent defaults for one environment."""
        cfg = self
        if cfg.fusion_range_cm is None:
            k = FUSION_PITCHES_3D if env.dimension == 3 else FUSION_PITCHES
            cfg = replace(cfg, fusion_range_cm=k * pitch)
        if cfg.jitter_sigmas is None:
            lo, hi = cfg.strength_window
            f = cfg.jitter_fraction
            sig = list(f * env.extent) + [f * (hi - lo)]
            if cfg.dipole:
                sig += [f * 2 * cfg.dipole_window] * env.dimension
            cfg = replace(cfg, jitter_sigmas=tuple(sig))
        if len(cfg.jitter_sigmas) != cfg.n_params(env.dimension):
            raise ValueError(
                f"jitter_sigmas needs {cfg.n_params(env.dimension)} entries, got {len(cfg.jitter_sigmas)}"
            )
        return cfg


@dataclass(frozen=True)
class Particle:
    params: SourceParams
    id: int
    log_weight: float


@dataclass(frozen=True)
class ResolvedSource:
    params: SourceParams
    confidence: float
    iteration_found: int


@dataclass
class ParticleSet:
    """Structure-of-arrays particle cloud with log weights kept normalized.

    ``lo``/``hi`` are per-parameter sampling ranges (bounds for positions,
    strength window, dipole window); ``scale`` is the width of each range and
    is used for feature scaling by the clustering code.
    """

    params: np.ndarray  # (N, P)
    ids: np.ndarray  # (N,)
    log_weights: np.ndarray  # (N,)
    next_id: int
    dim: int
    lo: np.ndarray
    hi: np.ndarray
    dipole: bool = False
    pending: Optional[np.ndarray] = None  # log-likelihood added since the last resample
    fit: Optional[np.ndarray] = None  # log-likelihood of the latest sweep, see run_inner_loop

    def __post_init__(self):
        if self.pending is None:
            self.pending = np.zeros(len(self.ids))

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Particle:
        return Particle(
            SourceParams.from_vector(self.params[i], self.dim, self.dipole),
            int(self.ids[i]),
            float(self.log_weights[i]),
        )

    @property
    def positions(self) -> np.ndarray:
        return self.params[:, : self.dim]

    @property
    def strengths(self) -> np.ndarray:
        return self.params[:, self.dim]

    @property
    def dipoles(self) -> Optional[np.ndarray]:
        return self.params[:, self.dim + 1 :] if self.dipole else None

    @property
    def scale(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def normalize(self) -> None:
        self.log_weights -= logsumexp(self.log_weights)

    def copy(self) -> "ParticleSet":
        return replace(
            self,
            params=self.params.copy(),
            ids=self.ids.copy(),
            log_weights=self.log_weights.copy(),
            pending=self.pending.copy(),
            fit=None if self.fit is None else self.fit.copy(),
        )

    def clamp(self, idx=slice(None)) -> None:
        d = self.dim
        p = self.params
        p[idx, :d] = np.clip(p[idx, :d], self.lo[:d], self.hi[:d])
        p[idx, d] = np.maximum(p[idx, d], 0.0)

    def uniform_params(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, len(self.lo)))

    def weighted_mean(self) -> np.ndarray:
        return self.weights @ self.params


def _param_ranges(env: Environment, cfg: FilterConfig):
    lo = list(env.lo) + [cfg.strength_window[0]]
    hi = list(env.hi) + [cfg.strength_window[1]]
    if cfg.dipole:
        lo += [-cfg.dipole_window] * env.dimension
        hi += [cfg.dipole_window] * env.dimension
    return np.array(lo, dtype=float), np.array(hi, dtype=float)


def _truncated_normal(rng: np.random.Generator, shape, limit: float = 3.0) -> np.ndarray:
    """Standard normal draws redrawn until they fall within ``limit`` sigmas."""
    z = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(z) > limit
    while bad.any():
        z[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(z) > limit
    return z


def init_particles(
    env: Environment,
    cfg: FilterConfig,
    prior: Optional[PriorPointSet] = None,
    rng: Optional[np.random.Generator] = None,
) -> ParticleSet:
    """Uniform particles over the environment and strength window.

    With a prior point set, positions are drawn from its points (by weight,
    when given) plus isotropic Gaussian jitter truncated at three sigmas.
    """
    rng = np.random.default_rng() if rng is None else rng
    n, dim = cfg.n_particles, env.dimension
    lo, hi = _param_ranges(env, cfg)
    params = rng.uniform(lo, hi, size=(n, len(lo)))
    if prior is not None:
        if prior.dim != dim:
            raise ValueError(f"prior points are {prior.dim}-D, environment is {dim}-D")
        if len(prior) == 0:
            raise ValueError("prior point set is empty")
        p = None
        if prior.weights is not None:
            tot = prior.weights.sum()
            if not tot > 0:
                raise ValueError("prior point weights sum to zero")
            p = prior.weights / tot
        pick = rng.choice(len(prior), size=n, p=p)
        sigma = cfg.prior_sigma_cm
        if sigma is None:
            sigma = 0.02 * float(env.extent.min()) if cfg.jitter_sigmas is None else float(min(cfg.jitter_sigmas[:dim]))
        params[:, :dim] = prior.points[pick] + sigma * _truncated_normal(rng, (n, dim))
    ps = ParticleSet(
        params,
        np.arange(n, dtype=np.int64),
        np.full(n, -np.log(n)),
        n,
        dim,
        lo,
        hi,
        cfg.dipole,
    )
    ps.clamp()
    return ps


def fusion_set(particles: ParticleSet, pose, d: float) -> np.ndarray:
    """Indices of particles with ``|S - p_pos|^2 <= d^2`` (closed ball)."""
    if not d > 0:
        raise ValueError("fusion range must be > 0")
    s = np.asarray(pose.position if hasattr(pose, "position") else pose, dtype=float)
    diff = particles.positions - s
    return np.flatnonzero(np.einsum("ij,ij->i", diff, diff) <= d * d)


def resolved_flux(pose, resolved: Sequence[ResolvedSource]) -> float:
    """Flux (pre-conversion) at ``pose`` from already resolved sources."""
    if not resolved:
        return 0.0
    rate = expected_intensity(pose, [r.params for r in resolved])
    return (rate - pose.background) / (UCI_TO_CPS * pose.efficiency)


def _log_factor(count: float, lam: np.ndarray, floor: float) -> np.ndarray:
    out = np.empty_like(lam)
    pos = lam > 0
    out[pos] = log_poisson_likelihood_normalized(count, lam[pos])
    out[~pos] = 0.0 if count == 0 else floor
    return np.maximum(out, floor)


def particle_rates(
    particles: ParticleSet, idx: np.ndarray, pose, base_flux: float = 0.0
) -> np.ndarray:
    """Expected CPS at ``pose`` for hypotheses ``idx`` on top of ``base_flux``."""
    flux = batch_flux(
        np.asarray(pose.position, dtype=float),
        pose.height,
        particles.positions[idx],
        particles.strengths[idx],
        None if not particles.dipole else particles.dipoles[idx],
    )
    return UCI_TO_CPS * pose.efficiency * (flux + base_flux) + pose.background


def reweight(
    particles: ParticleSet,
    m: Measurement,
    resolved: Sequence[ResolvedSource],
    cfg: FilterConfig,
    base_flux: Optional[float] = None,
) -> np.ndarray:
    """Multiply in the normalized Poisson likelihood of one reading.

    Only the particles within the fusion range are touched; each one is
    scored as if it were the only unresolved source next to the already
    ``resolved`` ones.  Log factors are floored at ``cfg.log_floor``.  No
    normalization happens here.  Returns the fusion-set indices.
    """
    idx = fusion_set(particles, m.pose, cfg.fusion_range_cm)
    if len(idx):
        if base_flux is None:
            base_flux = resolved_flux(m.pose, resolved)
        lam = particle_rates(particles, idx, m.pose, base_flux)
        inc = _log_factor(m.count, lam, cfg.log_floor)
        particles.log_weights[idx] += inc
        particles.pending[idx] += inc
    return idx


def _systematic(w: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    c = np.cumsum(w)
    c[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    return np.searchsorted(c, u, side="right")


def replace_random(particles: ParticleSet, n: int, rng: np.random.Generator, pool=None) -> np.ndarray:
    """Swap ``n`` particles (drawn from ``pool``, default all) for fresh uniform ones."""
    ps = particles
    pool = np.arange(len(ps)) if pool is None else np.asarray(pool)
    n = min(n, len(pool))
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    fresh = np.sort(rng.choice(pool, size=n, replace=False))
    ps.params[fresh] = ps.uniform_params(n, rng)
    ps.ids[fresh] = np.arange(ps.next_id, ps.next_id + n)
    ps.next_id += n
    ps.log_weights[fresh] = -np.log(len(ps)) + logsumexp(ps.log_weights)
    ps.pending[fresh] = 0.0
    return fresh


def resample(
    particles: ParticleSet,
    subset: np.ndarray,
    cfg: FilterConfig,
    rng: np.random.Generator,
) -> ParticleSet:
    """Resample inside ``subset``, jitter, then refresh a random fraction.

    Children are drawn in proportion to the current weights and share, in
    equal parts, the mass the subset held before the likelihood updates
    that are still pending; a reading therefore only moves particles around
    inside its own fusion range.  Children inherit their parent's id.
    Afterwards ``replace_fraction`` of the subset is swapped for fresh
    uniform particles with new ids and the full set is renormalized.
    Mutates and returns ``particles``.
    """
    subset = np.asarray(subset)
    if len(subset) == 0:
        raise ValueError("resample needs a nonempty subset")
    ps = particles
    k = len(subset)
    sub = ps.log_weights[subset]
    before = sub - ps.pending[subset]
    if not np.any(np.isfinite(sub)):
        # degenerate subset: restart it from the prior ranges
        ps.params[subset] = ps.uniform_params(k, rng)
        ps.ids[subset] = np.arange(ps.next_id, ps.next_id + k)
        ps.next_id += k
        ps.log_weights[subset] = logsumexp(before) - np.log(k) if np.any(np.isfinite(before)) else -np.log(len(ps))
    else:
        w = np.exp(sub - logsumexp(sub))
        parents = subset[_systematic(w, k, rng)]
        noise = rng.normal(0.0, 1.0, size=(k, ps.params.shape[1])) * np.asarray(cfg.jitter_sigmas)
        ps.params[subset] = ps.params[parents] + noise
        ps.ids[subset] = ps.ids[parents]
        ps.log_weights[subset] = logsumexp(before) - np.log(k)
        ps.clamp(subset)
    ps.pending[subset] = 0.0
    ps.fit = None
    replace_random(ps, int(round(cfg.replace_fraction * k)), rng, subset)
    ps.normalize()
    return ps


def checksum(measurements: Sequence[Measurement], resolved: Sequence[ResolvedSource]) -> float:
    """Readings minus what the resolved sources (plus background) explain."""
    srcs = [r.params for r in resolved]
    return float(sum(m.count - expected_intensity(m.pose, srcs) for m in measurements))


def default_bg_thresh(measurements: Sequence[Measurement]) -> float:
    """Four standard deviations of the summed background counts."""
    return 4.0 * float(np.sqrt(sum(m.pose.background for m in measurements)))


@dataclass
class StepDiagnostics:
    time_step: int
    ess: float
    entropy: float


@dataclass
class InnerLoopResult:
    particles: ParticleSet
    diagnostics: List[StepDiagnostics] = field(default_factory=list)
    last_sweep: List[Measurement] = field(default_factory=list)


Sweeps = Union[Sequence[Measurement], Callable[[int], Sequence[Measurement]]]


def weight_entropy(particles: ParticleSet) -> float:
    w = particles.weights
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


def run_inner_loop(
    particles: ParticleSet,
    measurements: Sweeps,
    resolved: Sequence[ResolvedSource],
    cfg: FilterConfig,
    rng: np.random.Generator,
    steps: Optional[int] = None,
    first_step: int = 0,
    dump: Optional["ParticleDump"] = None,
) -> InnerLoopResult:
    """Run ``steps`` (default ``cfg.steps_per_estimate``) full sweeps.

    ``measurements`` is either one sweep replayed every time step or a
    callable mapping a time-step number to that step's sweep.  With
    ``cfg.score_sweeps`` > 0 the summed log-likelihood of every particle
    over that many trailing sweeps is stored in ``particles.fit`` (weights
    are left alone): after the last resample the weights only encode local
    mass, while ``fit`` ranks neighbouring particles against the same
    readings.
    """
    steps = cfg.steps_per_estimate if steps is None else steps
    out = InnerLoopResult(particles)
    seen: List[Sequence[Measurement]] = []
    for t in range(first_step, first_step + steps):
        sweep = measurements(t) if callable(measurements) else measurements
        base = [resolved_flux(m.pose, resolved) for m in sweep]
        if cfg.per_sweep:
            for m, b in zip(sweep, base):
                reweight(particles, m, resolved, cfg, b)
            resample(particles, np.arange(len(particles)), cfg, rng)
        else:
            for m, b in zip(sweep, base):
                idx = reweight(particles, m, resolved, cfg, b)
                if len(idx):
                    resample(particles, idx, cfg, rng)
        particles.normalize()
        w = particles.weights
        out.diagnostics.append(StepDiagnostics(t, float(1.0 / np.sum(w * w)), weight_entropy(particles)))
        out.last_sweep = list(sweep)
        seen.append(out.last_sweep)
        if dump is not None:
            dump.write(t, len(sweep) - 1, particles)
    if cfg.score_sweeps > 0 and seen:
        particles.fit = sum(sweep_log_likelihood(particles, sw, resolved, cfg) for sw in seen[-cfg.score_sweeps :])
    return out


def sweep_log_likelihood(
    particles: ParticleSet,
    sweep: Sequence[Measurement],
    resolved: Sequence[ResolvedSource],
    cfg: FilterConfig,
) -> np.ndarray:
    """Summed floored log-likelihood of each particle over the readings in its fusion range."""
    total = np.zeros(len(particles))
    for m in sweep:
        idx = fusion_set(particles, m.pose, cfg.fusion_range_cm)
        if len(idx):
            lam = particle_rates(particles, idx, m.pose, resolved_flux(m.pose, resolved))
            total[idx] += _log_factor(m.count, lam, cfg.log_floor)
    return total


class ParticleDump:
    """Per-time-step particle snapshots as CSV, for external plotting."""

    def __init__(self, path, dim: int):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(
            ["time_step", "measurement_index", "id", *("x_cm", "y_cm", "z_cm")[:dim], "strength_uCi", "weight"]
        )
        self.dim = dim

    def write(self, time_step: int, measurement_index: int, particles: ParticleSet) -> None:
        w = particles.weights
        for i in range(len(particles)):
            row = particles.params[i, : self.dim + 1]
            self._w.writerow(
                [time_step, measurement_index, int(particles.ids[i]), *(repr(float(v)) for v in row), repr(float(w[i]))]
            )

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
