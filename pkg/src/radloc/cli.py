"""Command-line front end: ``radloc simulate | localize | sweep``.

Every output byte is a function of the scenario, the flags and the seed.
Repeats use seeds ``base + index`` and run in a process pool capped by the
``RADLOC_THREADS`` environment variable; results are gathered in index
order, so the worker count never changes what is written.

Exit codes: 0 success, 1 usage or configuration error, 2 when a localize
run stopped at ``--max-iterations`` instead of on the checksum.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

from .eval import RunSummary, aggregate_runs, default_match_radius, summarize, table_row, write_table
from .filter import FilterConfig, ParticleDump
from .labeler import ClusterConfig, LabelConfig, run_outer_loop
from .scenario import (
    Scenario,
    ScenarioError,
    generate_measurements,
    grid_scenario,
    load_prior_points,
    load_scenario,
    read_measurements,
    write_measurements,
)

EXIT_OK, EXIT_CONFIG, EXIT_MAX_ITER = 0, 1, 2


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text: str) -> List[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError(f"expected nonnegative integers, got {text!r}")
    return vals


def _outer_list(text: str) -> List[bool]:
    table = {"on": True, "off": False}
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals or any(v not in table for v in vals):
        raise argparse.ArgumentTypeError(f"expected a list of on/off, got {text!r}")
    return [table[v] for v in vals]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="base seed (default: the scenario's own seed, or 0)")
    p.add_argument("--repeats", type=_positive_int, default=1, help="seeded repeats, seeds base+index")
    p.add_argument("--particles", type=int, help="particles per filter (default 1000)")
    p.add_argument("--fusion-range", type=float, help="fusion range in cm (default: scaled to the pose spacing)")
    p.add_argument("--time-steps", type=int, help="sweeps per estimate (default 3)")
    p.add_argument("--max-iterations", type=int, help="outer-loop iterations (default 3)")
    p.add_argument("--clusterer", choices=("meanshift", "ahc", "id"), default="meanshift")
    p.add_argument("--bandwidth", type=float, help="mean-shift bandwidth in scaled units")
    p.add_argument("--confidence-thresh", type=float, help="acceptance threshold on c_k (default 0.8)")
    p.add_argument("--k-nearest", type=int, help="sensors scored by the confidence metric (default 3)")
    p.add_argument("--dipole", action="store_true", default=None, help="also estimate a dipole moment")
    p.add_argument("--prior", help="CSV of prior points for guided initialization")
    p.add_argument("--dump-particles", action="store_true", help="write per-step particle CSVs")
    p.add_argument("--out", default="radloc_out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="write a measurement CSV for a scenario")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--time-steps", type=_positive_int, default=1, help="number of sweeps to write")
    sim.add_argument("--out", default="radloc_out")

    loc = sub.add_parser("localize", help="run the localization pipeline")
    loc.add_argument("--scenario", required=True)
    loc.add_argument("--measurements", help="recorded CSV to use instead of simulating")
    _add_run_flags(loc)

    sw = sub.add_parser("sweep", help="benchmark table over source counts and outer loop on/off")
    sw.add_argument("--scenario", help="fixed scenario instead of random benchmark layouts")
    sw.add_argument("--sources", type=_int_list, default=[1, 2, 3, 4], help="e.g. 1,2,3,4")
    sw.add_argument("--outer", type=_outer_list, default=[True, False], help="e.g. on,off")
    sw.add_argument("--steps", type=_int_list, help="time-step settings to sweep, e.g. 3,4")
    _add_run_flags(sw)
    return parser


# --- configuration ---------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    """Everything one localize run needs; picklable for the worker pool."""

    scenario: Scenario
    fcfg: FilterConfig
    lcfg: LabelConfig
    ccfg: ClusterConfig
    prior_path: Optional[str] = None
    prior_samples: Optional[int] = None
    measurements_path: Optional[str] = None
    dump_path: Optional[str] = None

    def __post_init__(self):
        if self.scenario.seed < 0:
            raise ConfigError("seed must be >= 0")


def run_config(args, scn: Scenario, **overrides) -> RunConfig:
    """Merge flags over the scenario's ``run`` section over library defaults."""
    hints = dict(scn.run_defaults)
    hints.update(overrides)

    def pick(flag, key, default=None):
        v = getattr(args, flag, None)
        return v if v is not None else hints.get(key, default)

    try:
        fkw = dict(
            n_particles=pick("particles", "particles", 1000),
            fusion_range_cm=pick("fusion_range", "fusion_range_cm"),
            steps_per_estimate=pick("time_steps", "time_steps", 3),
            dipole=bool(pick("dipole", "dipole", False)),
        )
        fcfg = FilterConfig(**fkw)
        lkw = dict(max_iterations=pick("max_iterations", "max_iterations", 3), k=pick("k_nearest", "k_nearest", 3))
        if args.confidence_thresh is not None:
            lkw["confidence_thresh"] = args.confidence_thresh
        lcfg = LabelConfig(**lkw)
        ckw = {"backend": args.clusterer}
        if args.bandwidth is not None:
            if not args.bandwidth > 0:
                raise ValueError("bandwidth must be > 0")
            ckw["bandwidth"] = args.bandwidth
        ccfg = ClusterConfig(**ckw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if lcfg.k > len(scn.trajectory):
        raise ConfigError(f"--k-nearest {lcfg.k} exceeds the {len(scn.trajectory)} poses")
    prior = args.prior if args.prior is not None else hints.get("prior")
    if prior is not None and not Path(prior).is_file():
        raise ConfigError(f"prior point file not found: {prior}")
    return RunConfig(scn, fcfg, lcfg, ccfg, prior, hints.get("prior_samples"))


def _scenario(path: str) -> Scenario:
    try:
        return load_scenario(path)
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from exc


def _workers(n_jobs: int) -> int:
    raw = os.environ.get("RADLOC_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"RADLOC_THREADS must be an integer, got {raw!r}")
        if cap < 1:
            raise ConfigError("RADLOC_THREADS must be >= 1")
    return max(1, min(cap, n_jobs))


def run_jobs(fn, jobs: Sequence) -> list:
    """``[fn(j) for j in jobs]``, spread over the worker pool, in job order."""
    n = _workers(len(jobs))
    if n == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


# --- one run ---------------------------------------------------------------------


@dataclasses.dataclass
class JobResult:
    result_json: Optional[str]
    terminated_by: Optional[str]
    summary: RunSummary
    wall_seconds: float
    error: Optional[str] = None


def localize_job(cfg: RunConfig) -> JobResult:
    """Run the pipeline once; failures come back as an error string, not an exception."""
    scn = cfg.scenario
    t0 = time.perf_counter()
    try:
        prior = None
        if cfg.prior_path is not None:
            prior = load_prior_points(cfg.prior_path, scn.environment.dimension, cfg.prior_samples, scn.seed)
        measurements = read_measurements(cfg.measurements_path) if cfg.measurements_path else None
        dump = ParticleDump(cfg.dump_path, scn.environment.dimension) if cfg.dump_path else None
        try:
            res = run_outer_loop(scn, cfg.fcfg, cfg.lcfg, cfg.ccfg, prior=prior, measurements=measurements, dump=dump)
        finally:
            if dump is not None:
                dump.close()
    except (ScenarioError, ValueError) as exc:
        empty = RunSummary(0.0, 0.0, 0.0, None)
        return JobResult(None, None, empty, time.perf_counter() - t0, str(exc))
    summary = summarize(
        [r.params for r in res.resolved],
        scn.truth_sources,
        default_match_radius(scn.environment.extent),
        res.iterations_used,
        res.time_steps,
        res.wall_seconds,
    )
    return JobResult(res.to_json(timings=False) + "\n", res.terminated_by, summary, res.wall_seconds)


# --- commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scn = _scenario(args.scenario)
    if args.seed is not None:
        scn = dataclasses.replace(scn, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ms = [m for t in range(args.time_steps) for m in generate_measurements(scn, t)]
    path = out / "measurements.csv"
    write_measurements(ms, path)
    print(f"wrote {path}: {len(ms)} readings at {len(scn.trajectory)} poses, total {sum(m.count for m in ms)} CPS")
    return EXIT_OK


def _seeds(args, scn_seed: int) -> List[int]:
    base = args.seed if args.seed is not None else scn_seed
    if base < 0:
        raise ConfigError("--seed must be >= 0")
    return [base + i for i in range(args.repeats)]


def cmd_localize(args) -> int:
    scn = _scenario(args.scenario)
    if args.measurements is not None and not Path(args.measurements).is_file():
        raise ConfigError(f"measurement file not found: {args.measurements}")
    out = Path(args.out)
    base_cfg = run_config(args, scn)
    seeds = _seeds(args, scn.seed)
    single = len(seeds) == 1
    jobs = []
    for s in seeds:
        name = "" if single else f"_{s}"
        jobs.append(
            dataclasses.replace(
                base_cfg,
                scenario=dataclasses.replace(scn, seed=s),
                measurements_path=args.measurements,
                dump_path=str(out / f"particles{name}.csv") if args.dump_particles else None,
            )
        )
    out.mkdir(parents=True, exist_ok=True)
    results = run_jobs(localize_job, jobs)
    code = EXIT_OK
    for s, r in zip(seeds, results):
        if r.error is not None:
            print(f"seed {s}: error: {r.error}", file=sys.stderr)
            code = max(code, EXIT_CONFIG)
            continue
        (out / ("result.json" if single else f"result_{s}.json")).write_text(r.result_json)
        sm = r.summary
        print(
            f"seed {s}: {r.terminated_by} after {sm.iterations:g} iteration(s), "
            f"P {sm.precision:.3f} R {sm.recall:.3f} F1 {sm.f1:.3f}, {r.wall_seconds:.2f} s"
        )
        if r.terminated_by == "max_iterations" and code == EXIT_OK:
            code = EXIT_MAX_ITER
    if not single:
        agg = aggregate_runs([r.summary for r in results])
        write_table([table_row(Path(args.scenario).stem, agg)], out / "summary.csv")
    return code


def cmd_sweep(args) -> int:
    scn_fixed = _scenario(args.scenario) if args.scenario else None
    steps_list = args.steps or [args.time_steps if args.time_steps is not None else None]
    if args.steps and args.time_steps is not None:
        raise ConfigError("give either --steps or --time-steps, not both")
    layouts = [("scenario", None)] if scn_fixed else [(f"{n}src", n) for n in args.sources]
    cells, jobs = [], []
    for label, n_src in layouts:
        for steps in steps_list:
            for outer in args.outer:
                overrides = {} if steps is None else {"time_steps": steps}
                name = f"{label}-{'outer' if outer else 'naive'}" + ("" if steps is None else f"-s{steps}")
                start = len(jobs)
                base = scn_fixed.seed if scn_fixed else 0
                for seed in _seeds(args, base):
                    scn = dataclasses.replace(scn_fixed, seed=seed) if scn_fixed else grid_scenario(n_src, seed)
                    cfg = run_config(args, scn, **overrides)
                    if not outer:
                        cfg.lcfg = dataclasses.replace(cfg.lcfg, max_iterations=1)
                    jobs.append(cfg)
                cells.append((name, start, len(jobs)))
    results = run_jobs(localize_job, jobs)
    rows = []
    for name, a, b in cells:
        for r in results[a:b]:
            if r.error is not None:
                print(f"{name}: run failed: {r.error}", file=sys.stderr)
        agg = aggregate_runs([r.summary for r in results[a:b]])
        rows.append(table_row(name, agg))
        print(f"{name}: F1 {agg['f1']:.3f} iterations {agg['iterations']:.2f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, out / "table.csv")
    print(f"wrote {out / 'table.csv'}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "localize": cmd_localize, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"radloc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"radloc: error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
