"""Closed-loop rollouts on the bundled scenarios with the default planner."""
from uasmpc.cli import bundled_scenarios
from uasmpc.metrics import evaluate
from uasmpc.planner import PlannerConfig
from uasmpc.simulation import load_scenario, run_closed_loop

cfg = PlannerConfig.preset("short", p=0.9)
for path in bundled_scenarios():
    sc = load_scenario(path)
    log = run_closed_loop(sc, cfg, alpha=1.0, seed=0)
    m = evaluate(log.records, sc.expert_progress)
    print(f"{sc.id:<11} steps={len(log.records):3d} progress={m.progress:.3f} jerk={m.avg_abs_jerk:.3f} "
          f"min TTC={m.min_ttc:.2f} collided={m.collided} score={m.closed_loop_score:.3f}")
