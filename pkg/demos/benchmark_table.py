"""
Outer loop against a single pass
================================

Random layouts of one to four sources on a 20 m grid, scored with and
without reruns.  This is what ``radloc sweep`` computes; here it is spelled
out with the library calls.

Run with ``python demos/benchmark_table.py [repeats]`` (default 10; 100
matches the acceptance suite and takes a few minutes).
"""

import sys

from radloc.eval import aggregate_runs, default_match_radius, summarize
from radloc.filter import FilterConfig
from radloc.labeler import LabelConfig, run_outer_loop
from radloc.scenario import grid_scenario

repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 10

print(f"{'sources':>7} {'mode':>6} {'F1':>6} {'P':>6} {'R':>6} {'iters':>6} {'err m':>7}")
for n in (1, 2, 3, 4):
    for mode, max_iter in (("outer", 3), ("naive", 1)):
        runs = []
        for seed in range(repeats):
            scn = grid_scenario(n, seed)
            res = run_outer_loop(scn, FilterConfig(), LabelConfig(max_iterations=max_iter))
            runs.append(
                summarize(
                    [r.params for r in res.resolved],
                    scn.truth_sources,
                    default_match_radius(scn.environment.extent),
                    res.iterations_used,
                )
            )
        agg = aggregate_runs(runs)
        err = "-" if agg["eps_l_norm"] is None else f"{agg['eps_l_norm']:.3f}"
        print(
            f"{n:>7} {mode:>6} {agg['f1']:6.3f} {agg['precision']:6.3f} {agg['recall']:6.3f} "
            f"{agg['iterations']:6.2f} {err:>7}"
        )
