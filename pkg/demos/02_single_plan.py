"""One planning step past an agent whose forecast has three modes."""
import numpy as np

from uasmpc.planner import EgoState, PlannerConfig, plan
from uasmpc.prediction import AgentState, GmmPrediction, constant_velocity_predict

cfg = PlannerConfig.preset("short", p=0.9)
route = np.stack([np.linspace(0, 120, 1201), np.zeros(1201)], axis=1)
ego = EgoState([0.0, 0.0], [8.0, 0.0])

# An agent ahead that may keep its lane, drift left or drift right.
agent = AgentState([20.0, 2.0], [2.0, 0.0])
base = constant_velocity_predict(agent, cfg.N, cfg.dt)
drift = np.outer(np.arange(1, cfg.N + 1) * cfg.dt, [0.0, 1.0])
means = np.stack([base.means[0], base.means[0] - drift, base.means[0] + drift])
pred = GmmPrediction([0.6, 0.3, 0.1], means, np.repeat(base.covs, 3, axis=0))

for alpha in (0.25, 1.0, 4.0):
    scaled = GmmPrediction(pred.probs, pred.means, alpha * pred.covs)
    res = plan(ego, [agent], [scaled], route, cfg)
    print(f"alpha={alpha:<5} status={res.status:<8} first control={np.round(res.first_control, 3)} "
          f"cost={res.cost:.3f} min margin={res.min_margin:+.3f}")

# Every mode plan starts with the same control: only one can be applied.
print("first controls per mode:\n", res.controls[:, 0])
