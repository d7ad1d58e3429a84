"""Environments, trajectories, synthetic readings and scenario files.

All lengths are stored in cm.  Scenario files may declare ``"units": "m"``
and are converted on load.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .model import Measurement, SensorPose, SourceParams, expected_intensity

DEFAULT_HEIGHT_CM = 100.0
DEFAULT_BACKGROUND_CPS = 2.0
DEFAULT_EFFICIENCY = 1.0
DEFAULT_DWELL_S = 10.0


class ScenarioError(ValueError):
    """Malformed scenario or data file."""


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class Environment:
    dimension: int
    bounds: tuple  # ((min, max), ...) per axis, cm
    background: float = DEFAULT_BACKGROUND_CPS
    efficiency: float = DEFAULT_EFFICIENCY

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", bounds)
        if self.dimension not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dimension}")
        if len(bounds) != self.dimension:
            raise ValueError(f"{len(bounds)} bound pairs for a {self.dimension}-D environment")
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"bad bounds ({lo}, {hi}): min must be < max")

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, point, tol: float = 1e-9) -> bool:
        p = np.asarray(point, dtype=float)
        return p.shape == (self.dimension,) and bool(
            np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol)
        )


@dataclass
class Scenario:
    environment: Environment
    truth_sources: List[SourceParams]
    trajectory: List[SensorPose]
    seed: int = 0
    dwell_s: float = DEFAULT_DWELL_S
    trajectory_spec: Optional[dict] = field(default=None, compare=False)
    run_defaults: dict = field(default_factory=dict, compare=False)  # see RUN_KEYS

    def __post_init__(self):
        env = self.environment
        if not self.trajectory:
            raise ValueError("trajectory must be nonempty")
        if not self.dwell_s > 0:
            raise ValueError(f"dwell_s must be > 0, got {self.dwell_s}")
        for src in self.truth_sources:
            if not env.contains(src.position):
                raise ValueError(f"source at {src.position} outside environment bounds")
        for pose in self.trajectory:
            if not env.contains(pose.position):
                raise ValueError(f"pose at {pose.position} outside environment bounds")


@dataclass
class PriorPointSet:
    points: np.ndarray  # (n, D)
    weights: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)


def lawnmower_trajectory(
    env: Environment,
    rows: int,
    cols: int,
    height: float = DEFAULT_HEIGHT_CM,
    altitudes: Optional[Sequence[float]] = None,
) -> List[SensorPose]:
    """Serpentine coverage grid with poses at cell centers.

    Rows run along y and columns along x; odd rows are traversed backwards so
    that consecutive poses are always one cell apart.  For a 3-D environment
    each entry of ``altitudes`` adds one full serpentine layer at that z
    (default: mid-height).
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be >= 1, got {rows}x{cols}")
    lo, ext = env.lo, env.extent
    xs = lo[0] + (np.arange(cols) + 0.5) * ext[0] / cols
    ys = lo[1] + (np.arange(rows) + 0.5) * ext[1] / rows
    plane = []
    for r, y in enumerate(ys):
        order = xs if r % 2 == 0 else xs[::-1]
        plane.extend((x, y) for x in order)
    common = dict(height=height, efficiency=env.efficiency, background=env.background)
    if env.dimension == 2:
        return [SensorPose(p, **common) for p in plane]
    if altitudes is None:
        altitudes = [env.center[2]]
    poses = []
    for k, z in enumerate(altitudes):
        layer = plane if k % 2 == 0 else plane[::-1]
        poses.extend(SensorPose((x, y, z), **common) for x, y in layer)
    return poses


def cell_pitch(scn_or_env, rows: int = None, cols: int = None) -> float:
    """Largest spacing between adjacent lawnmower poses."""
    if isinstance(scn_or_env, Scenario):
        spec = scn_or_env.trajectory_spec or {}
        env = scn_or_env.environment
        if spec.get("type") == "lawnmower":
            rows, cols = spec["rows"], spec["cols"]
        else:
            pts = np.array([p.position for p in scn_or_env.trajectory])
            if len(pts) < 2:
                return float(env.extent.max())
            return float(np.median(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    else:
        env = scn_or_env
    return float(max(env.extent[0] / cols, env.extent[1] / rows))


def expected_rates(poses: Sequence[SensorPose], sources: Sequence[SourceParams]) -> np.ndarray:
    return np.array([expected_intensity(p, sources) for p in poses])


def generate_measurements(
    scn: Scenario, time_step: int = 0, freeze: bool = False
) -> List[Measurement]:
    """One sweep of noisy readings along the scenario trajectory.

    Each reading integrates Poisson counts over ``dwell_s`` seconds and
    reports the rate truncated to whole CPS, like an integer counter.  The noise stream is keyed by
    ``(seed, time_step)`` so every sweep is an independent re-flight; with
    ``freeze`` the counts are the floor of the expected rate instead.
    """
    rates = expected_rates(scn.trajectory, scn.truth_sources)
    if freeze:
        counts = np.floor(rates)
    else:
        rng = stream(scn.seed, 0xC0, time_step)
        counts = np.floor(rng.poisson(rates * scn.dwell_s) / scn.dwell_s)
    return [
        Measurement(pose, int(c), time_step) for pose, c in zip(scn.trajectory, counts)
    ]


# --- scenario JSON -------------------------------------------------------------

# optional "run" section: per-scenario run settings that command-line flags override
RUN_KEYS = {
    "particles": int,
    "time_steps": int,
    "max_iterations": int,
    "fusion_range_cm": float,
    "k_nearest": int,
    "dipole": bool,
    "prior": str,  # CSV path, relative to the scenario file
    "prior_samples": int,
}


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _need(obj: dict, key: str, text: str, where: str = ""):
    if not isinstance(obj, dict) or key not in obj:
        line = _line_of(text, where) if where else 1
        raise ScenarioError(f"missing field '{key}'" + (f" in '{where}'" if where else "") + f" (line {line})")
    return obj[key]


def _bad(key: str, text: str, why: str):
    return ScenarioError(f"invalid field '{key}' (line {_line_of(text, key)}): {why}")


def parse_scenario(text: str) -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a JSON object (line 1)")

    dim = _need(raw, "dimension", text)
    if dim not in (2, 3):
        raise _bad("dimension", text, f"must be 2 or 3, got {dim!r}")
    units = raw.get("units", "cm")
    if units not in ("cm", "m"):
        raise _bad("units", text, f"must be 'cm' or 'm', got {units!r}")
    k = 100.0 if units == "m" else 1.0

    bounds = _need(raw, "bounds", text)
    try:
        bounds = [(k * float(lo), k * float(hi)) for lo, hi in bounds]
        env = Environment(
            dim,
            bounds,
            background=float(raw.get("background_cps", DEFAULT_BACKGROUND_CPS)),
            efficiency=float(raw.get("efficiency", DEFAULT_EFFICIENCY)),
        )
    except (TypeError, ValueError) as exc:
        raise _bad("bounds", text, str(exc)) from exc

    sources = []
    for i, s in enumerate(_need(raw, "sources", text)):
        try:
            pos = [k * float(v) for v in _need(s, "position", text, "sources")]
            dip = s.get("dipole")
            sources.append(
                SourceParams(
                    pos,
                    float(_need(s, "strength_uCi", text, "sources")),
                    None if dip is None else [k * float(v) for v in dip],
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise _bad("sources", text, f"source {i}: {exc}") from exc
        if len(pos) != dim:
            raise _bad("sources", text, f"source {i} has {len(pos)} coordinates, expected {dim}")

    traj = _need(raw, "trajectory", text)
    ttype = _need(traj, "type", text, "trajectory")
    spec = None
    try:
        if ttype == "lawnmower":
            alts = traj.get("altitudes_cm")
            spec = {
                "type": "lawnmower",
                "rows": int(_need(traj, "rows", text, "trajectory")),
                "cols": int(_need(traj, "cols", text, "trajectory")),
                "height_cm": k * float(traj.get("height_cm", DEFAULT_HEIGHT_CM / k)),
            }
            if alts is not None:
                spec["altitudes_cm"] = [k * float(a) for a in alts]
            poses = lawnmower_trajectory(
                env, spec["rows"], spec["cols"], spec["height_cm"], spec.get("altitudes_cm")
            )
        elif ttype == "explicit":
            default_h = k * float(traj.get("height_cm", DEFAULT_HEIGHT_CM / k))
            poses = []
            for p in _need(traj, "poses", text, "trajectory"):
                if isinstance(p, dict):
                    poses.append(
                        SensorPose(
                            [k * float(v) for v in _need(p, "position", text, "poses")],
                            k * float(p["height_cm"]) if "height_cm" in p else default_h,
                            float(p.get("efficiency", env.efficiency)),
                            float(p.get("background_cps", env.background)),
                        )
                    )
                else:
                    poses.append(
                        SensorPose([k * float(v) for v in p], default_h, env.efficiency, env.background)
                    )
        else:
            raise _bad("type", text, f"unknown trajectory type {ttype!r}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise _bad("trajectory", text, str(exc)) from exc
    for p in poses:
        if len(p.position) != dim:
            raise _bad("trajectory", text, f"pose {p.position} is not {dim}-D")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise _bad("seed", text, f"must be a nonnegative integer, got {seed!r}")
    run = raw.get("run", {})
    if not isinstance(run, dict):
        raise _bad("run", text, "must be an object")
    for key, val in run.items():
        if key not in RUN_KEYS:
            raise _bad("run", text, f"unknown setting {key!r}")
        kind = RUN_KEYS[key]
        ok = isinstance(val, kind) if kind is not float else isinstance(val, (int, float))
        if not ok or isinstance(val, bool) != (kind is bool):
            raise _bad("run", text, f"{key} must be {kind.__name__}, got {val!r}")
    try:
        return Scenario(
            env, sources, poses, seed, float(raw.get("dwell_s", DEFAULT_DWELL_S)), spec, dict(run)
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path) -> Scenario:
    """Read a scenario file; a relative ``run.prior`` path is resolved against it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from exc
    try:
        scn = parse_scenario(text)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if "prior" in scn.run_defaults:
        scn.run_defaults["prior"] = str(path.parent / scn.run_defaults["prior"])
    return scn


def scenario_to_dict(scn: Scenario) -> dict:
    env = scn.environment
    out = {
        "dimension": env.dimension,
        "bounds": [list(b) for b in env.bounds],
        "units": "cm",
        "background_cps": env.background,
        "efficiency": env.efficiency,
        "dwell_s": scn.dwell_s,
        "sources": [],
        "seed": scn.seed,
    }
    for s in scn.truth_sources:
        entry = {"position": list(s.position), "strength_uCi": s.strength}
        if s.dipole is not None:
            entry["dipole"] = list(s.dipole)
        out["sources"].append(entry)
    if scn.run_defaults:
        out["run"] = dict(scn.run_defaults)
    if scn.trajectory_spec is not None and scn.trajectory_spec.get("type") == "lawnmower":
        out["trajectory"] = dict(scn.trajectory_spec)
    else:
        out["trajectory"] = {
            "type": "explicit",
            "poses": [
                {
                    "position": list(p.position),
                    "height_cm": p.height,
                    "efficiency": p.efficiency,
                    "background_cps": p.background,
                }
                for p in scn.trajectory
            ],
        }
    return out


def save_scenario(scn: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scn), indent=2) + "\n")


def bundled_scenario(name: str) -> Scenario:
    """Load one of the scenarios shipped in ``radloc/data``."""
    here = Path(__file__).with_name("data")
    return load_scenario(here / (name if name.endswith(".json") else name + ".json"))


def bundled_path(name: str) -> Path:
    return Path(__file__).with_name("data") / name


# --- CSV files -------------------------------------------------------------------

_AXES = ("x_cm", "y_cm", "z_cm")


def measurement_header(dim: int) -> List[str]:
    return ["time_step", *_AXES[:dim], "height_cm", "efficiency", "background_cps", "count_cps"]


def write_measurements(measurements: Sequence[Measurement], path) -> None:
    dim = len(measurements[0].pose.position) if measurements else 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(measurement_header(dim))
        for m in measurements:
            p = m.pose
            w.writerow([m.time_step, *map(repr, p.position), repr(p.height), repr(p.efficiency), repr(p.background), m.count])


def read_measurements(path) -> List[Measurement]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ScenarioError(f"{path}: no measurements")
    dim = 3 if "z_cm" in rows[0] else 2
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            pose = SensorPose(
                tuple(float(r[a]) for a in _AXES[:dim]),
                float(r["height_cm"]),
                float(r["efficiency"]),
                float(r["background_cps"]),
            )
            out.append(Measurement(pose, int(r["count_cps"]), int(r["time_step"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"{path}: bad measurement row (line {i}): {exc}") from exc
    return out


def load_prior_points(
    path, dim: Optional[int] = None, n_samples: Optional[int] = None, seed: int = 0
) -> PriorPointSet:
    """Read a prior point cloud CSV, optionally under-sampled to ``n_samples``.

    The file has a header naming ``x_cm, y_cm[, z_cm][, weight]``; a file
    without a header is read positionally using ``dim``.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ScenarioError(f"{path}: empty prior point file")
    head = [c.strip() for c in rows[0]]
    if head[0] == "x_cm":
        ncoord = 3 if "z_cm" in head else 2
        has_w = "weight" in head
        rows = rows[1:]
    else:
        ncoord = dim if dim is not None else len(head)
        if len(head) not in (ncoord, ncoord + 1):
            raise ScenarioError(f"{path}: {len(head)} columns do not fit {ncoord}-D prior points")
        has_w = len(head) == ncoord + 1
    if not rows:
        raise ScenarioError(f"{path}: empty prior point file")
    if dim is not None and ncoord != dim:
        raise ScenarioError(f"{path}: prior points are {ncoord}-D, environment is {dim}-D")
    try:
        arr = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != ncoord + has_w:
        raise ScenarioError(f"{path}: expected {ncoord + has_w} columns per row")
    pts = arr[:, :ncoord]
    weights = arr[:, ncoord] if has_w else None
    if weights is not None and np.any(weights < 0):
        raise ScenarioError(f"{path}: negative point weight")
    if n_samples is not None and n_samples < len(pts):
        idx = np.sort(stream(seed, 0xB1).choice(len(pts), size=n_samples, replace=False))
        pts = pts[idx]
        weights = None if weights is None else weights[idx]
    return PriorPointSet(pts, weights)


def write_prior_points(prior: PriorPointSet, path) -> None:
    dim = prior.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*_AXES[:dim]] + (["weight"] if prior.weights is not None else []))
        for i, p in enumerate(prior.points):
            row = [repr(float(v)) for v in p]
            if prior.weights is not None:
                row.append(repr(float(prior.weights[i])))
            w.writerow(row)


# --- synthetic layouts -----------------------------------------------------------

# benchmark layouts: source strengths and the closest allowed pair, in cell pitches
BENCH_STRENGTH_UCI = (10.0, 30.0)
BENCH_SEPARATION_PITCHES = 2.5


def random_sources(
    env: Environment,
    n: int,
    rng: np.random.Generator,
    strength_range=(10.0, 30.0),
    min_separation: float = 0.0,
    margin: float = 0.0,
) -> List[SourceParams]:
    """Uniformly placed sources with a minimum pairwise separation."""
    lo, hi = env.lo + margin, env.hi - margin
    out: List[np.ndarray] = []
    for _ in range(10000):
        if len(out) == n:
            break
        p = rng.uniform(lo, hi)
        if all(np.linalg.norm(p - q) >= min_separation for q in out):
            out.append(p)
    else:
        raise ValueError(f"cannot place {n} sources {min_separation} cm apart")
    strengths = rng.uniform(*strength_range, size=n)
    return [SourceParams(tuple(p), s) for p, s in zip(out, strengths)]


def grid_scenario(
    n_sources: int,
    seed: int,
    edge_cm: float = 2000.0,
    rows: int = 10,
    cols: int = 10,
    height: float = DEFAULT_HEIGHT_CM,
    strength_range=BENCH_STRENGTH_UCI,
    min_separation: Optional[float] = None,
    dwell_s: float = DEFAULT_DWELL_S,
) -> Scenario:
    """Square 2-D survey with randomly placed sources, as used for benchmark tables.

    The layout is drawn from ``seed``; the measurement noise uses the same
    seed through its own stream.
    """
    env = Environment(2, ((0.0, edge_cm), (0.0, edge_cm)))
    if min_separation is None:
        min_separation = BENCH_SEPARATION_PITCHES * max(edge_cm / rows, edge_cm / cols)
    margin = 0.5 * edge_cm / max(rows, cols)
    sources = random_sources(
        env, n_sources, stream(seed, 0x5C), strength_range, min_separation, margin
    )
    spec = {"type": "lawnmower", "rows": rows, "cols": cols, "height_cm": height}
    poses = lawnmower_trajectory(env, rows, cols, height)
    return Scenario(env, sources, poses, seed, dwell_s, spec)


def room_surface_points(
    env: Environment,
    n_points: int,
    rng: np.random.Generator,
    tops: Sequence[tuple] = (),
) -> PriorPointSet:
    """Uniform points on the floor and the four walls of a 3-D room.

    ``tops`` adds horizontal furniture surfaces ``(x0, x1, y0, y1, z)``.
    Points are spread in proportion to surface area, like a depth-camera
    map of the places a source can rest on; the ceiling is left out.
    """
    if env.dimension != 3:
        raise ValueError("room surfaces need a 3-D environment")
    (x0, x1), (y0, y1), (z0, z1) = env.bounds
    # (fixed axis, value, ranges of the two free axes in increasing axis order)
    faces = [
        (2, z0, (x0, x1), (y0, y1)),
        (0, x0, (y0, y1), (z0, z1)),
        (0, x1, (y0, y1), (z0, z1)),
        (1, y0, (x0, x1), (z0, z1)),
        (1, y1, (x0, x1), (z0, z1)),
    ] + [(2, z, (a0, a1), (b0, b1)) for a0, a1, b0, b1, z in tops]
    areas = np.array([(a[1] - a[0]) * (b[1] - b[0]) for _, _, a, b in faces])
    counts = rng.multinomial(n_points, areas / areas.sum())
    chunks = []
    for (axis, val, a, b), n in zip(faces, counts):
        pts = np.empty((n, 3))
        free = [i for i in range(3) if i != axis]
        pts[:, axis] = val
        pts[:, free[0]] = rng.uniform(*a, n)
        pts[:, free[1]] = rng.uniform(*b, n)
        chunks.append(pts)
    return PriorPointSet(np.vstack(chunks))
