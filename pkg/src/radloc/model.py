"""Forward model: inverse-square particle flux, count rates and Poisson readings.

Coordinates are in cm, strengths in microcuries.  A sensor reading is the
expected rate ``3.7e4 * E * sum(flux) + B`` in counts per second, observed
through Poisson noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

#: counts per second produced by one microcurie (1 uCi = 3.7e4 Bq)
UCI_TO_CPS = 3.7e4


@dataclass(frozen=True)
class SourceParams:
    """A point source, optionally carrying a dipole moment (uCi*cm)."""

    position: tuple
    strength: float
    dipole: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "strength", float(self.strength))
        if self.strength < 0:
            raise ValueError(f"source strength must be >= 0, got {self.strength}")
        if self.dipole is not None:
            dip = tuple(float(v) for v in self.dipole)
            if len(dip) != len(self.position):
                raise ValueError(
                    f"dipole has {len(dip)} components, position has {len(self.position)}"
                )
            object.__setattr__(self, "dipole", dip)

    @property
    def dim(self) -> int:
        return len(self.position)

    def as_vector(self, with_dipole: bool = False) -> np.ndarray:
        """Flatten to ``[pos..., strength(, dipole...)]``."""
        vec = list(self.position) + [self.strength]
        if with_dipole:
            vec += list(self.dipole) if self.dipole is not None else [0.0] * self.dim
        return np.asarray(vec, dtype=float)

    @classmethod
    def from_vector(cls, vec, dim: int, with_dipole: bool = False) -> "SourceParams":
        vec = np.asarray(vec, dtype=float)
        dipole = tuple(vec[dim + 1 : 2 * dim + 1]) if with_dipole else None
        return cls(tuple(vec[:dim]), max(float(vec[dim]), 0.0), dipole)


@dataclass(frozen=True)
class SensorPose:
    """Where and how a reading was taken.

    In 2-D ``position`` is the ground-frame (x, y) and ``height`` is the
    altitude above the ground plane.  In 3-D ``position`` is the full
    detector location and ``height`` acts as a stand-off that regularizes the
    distance at the source.
    """

    position: tuple
    height: float = 100.0
    efficiency: float = 1.0
    background: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if not self.height > 0:
            raise ValueError(f"sensor height must be > 0, got {self.height}")
        if not self.efficiency > 0:
            raise ValueError(f"sensor efficiency must be > 0, got {self.efficiency}")
        if self.background < 0:
            raise ValueError(f"background must be >= 0, got {self.background}")


@dataclass(frozen=True)
class Measurement:
    pose: SensorPose
    count: int
    time_step: int = 0

    def __post_init__(self):
        if self.count < 0 or int(self.count) != self.count:
            raise ValueError(f"count must be a nonnegative integer, got {self.count}")


def flux_contribution(sensor: SensorPose, source: SourceParams) -> float:
    """Monopole flux ``A_str / (h^2 + |x - A_pos|^2)``."""
    if not sensor.height > 0:
        raise ValueError("sensor height must be > 0")
    d = np.subtract(sensor.position, source.position)
    return source.strength / (sensor.height**2 + float(d @ d))


def dipole_flux_contribution(sensor: SensorPose, source: SourceParams) -> float:
    """Monopole flux plus ``(P . d_hat) / r_eff^3``, floored at zero.

    ``d`` points from the source to the sensor; at zero displacement the
    dipole term vanishes.
    """
    mono = flux_contribution(sensor, source)
    if source.dipole is None:
        return mono
    d = np.subtract(sensor.position, source.position)
    dist = float(np.sqrt(d @ d))
    if dist == 0.0:
        return mono
    r2 = sensor.height**2 + dist**2
    dip = float(np.dot(source.dipole, d)) / dist / r2**1.5
    return max(mono + dip, 0.0)


def expected_intensity(sensor: SensorPose, sources: Sequence[SourceParams]) -> float:
    """Expected count rate (CPS) at ``sensor`` from ``sources`` plus background."""
    total = 0.0
    for src in sources:
        total += dipole_flux_contribution(sensor, src)
    return UCI_TO_CPS * sensor.efficiency * total + sensor.background


def batch_flux(
    sensor_pos: np.ndarray,
    height: float,
    positions: np.ndarray,
    strengths: np.ndarray,
    dipoles: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vectorized flux of many hypotheses at one sensor.

    ``positions`` is ``(n, D)``; returns ``(n,)``.  Same formula as
    :func:`dipole_flux_contribution`.
    """
    d = sensor_pos[None, :] - positions
    dist2 = np.einsum("ij,ij->i", d, d)
    r2 = height * height + dist2
    flux = strengths / r2
    if dipoles is not None:
        dist = np.sqrt(dist2)
        safe = np.where(dist > 0, dist, 1.0)
        proj = np.einsum("ij,ij->i", dipoles, d) / safe
        proj = np.where(dist > 0, proj, 0.0)
        flux = np.maximum(flux + proj / (r2 * np.sqrt(r2)), 0.0)
    return flux


def sample_count(rate: float, rng: np.random.Generator) -> int:
    """One Poisson draw with mean ``rate``.

    numpy's generator uses multiplication below rate 10 and the PTRS
    transformed-rejection sampler above it.
    """
    if rate < 0 or not np.isfinite(rate):
        raise ValueError(f"rate must be finite and >= 0, got {rate}")
    if rate == 0:
        return 0
    return int(rng.poisson(rate))


def log_poisson_likelihood_normalized(x, y):
    """``log p(x|y) - log p(floor(y)|y)`` for Poisson mass ``p``; vectorized.

    The ``-y`` terms cancel, leaving
    ``(x - floor(y)) ln y - lnG(x+1) + lnG(floor(y)+1)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("Poisson rate must be > 0")
    fy = np.floor(y)
    return (x - fy) * np.log(y) - gammaln(x + 1.0) + gammaln(fy + 1.0)


def poisson_likelihood_normalized(x: int, y: float) -> float:
    """Poisson mass of ``x`` at mean ``y`` divided by the mass at ``floor(y)``.

    The mode of a Poisson(y) is ``floor(y)`` so the result lies in (0, 1]; it
    may underflow to 0.0 in linear scale for extreme mismatch, use
    :func:`log_poisson_likelihood_normalized` to keep the exponent.
    """
    if x < 0:
        raise ValueError(f"count must be >= 0, got {x}")
    return float(np.exp(log_poisson_likelihood_normalized(x, y)))
