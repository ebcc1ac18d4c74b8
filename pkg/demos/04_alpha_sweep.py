"""Covariance scaling sweep: how caution trades against progress.

Writes the run table, aggregate and markdown summary to ./sweep_demo.
"""
from uasmpc.cli import SweepSpec, bundled_scenarios, run_sweep
from uasmpc.planner import PlannerConfig

alphas = [1 / 4, 1 / 3, 1 / 2, 1, 2, 3, 4, 5]
spec = SweepSpec(alphas, bundled_scenarios(), "short", (0,))
rows, agg = run_sweep(spec, "sweep_demo", PlannerConfig.preset("short"))
print(open("sweep_demo/sweep_table.md").read())
