"""Calibration of mixture forecasts: honest, overconfident and underconfident."""
import numpy as np

from uasmpc.prediction import GmmPrediction, avg_entropy, ece, sample_trajectories, scale_covariances, step_records

rng = np.random.default_rng(1)
preds, truths = [], []
for i in range(300):
    J = int(rng.integers(1, 4))
    A = rng.normal(size=(J, 6, 2, 2))
    pred = GmmPrediction(rng.dirichlet(np.ones(J)), rng.normal(scale=3.0, size=(J, 6, 2)),
                         A @ np.swapaxes(A, -1, -2) + 0.1 * np.eye(2))
    preds.append(pred)
    truths.append(sample_trajectories(pred, 1, seed=i)[0])  # truth drawn from the forecast itself

for scale in (0.1, 1.0, 10.0):
    recs = [r for p, t in zip(preds, truths) for r in step_records(scale_covariances(p, scale), t)]
    h = np.mean([avg_entropy(scale_covariances(p, scale)) for p in preds])
    print(f"covariance x{scale:<4} ECE={ece(recs):.4f} mean entropy={h:+.3f}")
