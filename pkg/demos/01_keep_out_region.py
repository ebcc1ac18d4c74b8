"""Keep-out region for a Gaussian agent, and a Monte Carlo check of its guarantee."""
import numpy as np

from uasmpc.geometry import OverlapRect, chi2_quantile_2dof, constraint_value, rects_overlap

# An agent at the origin with an elongated, rotated position covariance.
mu = np.zeros(2)
cov = np.array([[2.0, 0.8], [0.8, 0.6]])
rect = OverlapRect(5.0, 2.0)  # ego and agent half sizes summed
p = 0.9
beta = chi2_quantile_2dof(p)
print(f"confidence p={p}: chi-square radius sqrt(beta) = {np.sqrt(beta):.4f}")

# The margin is positive outside the region and negative inside.
for x in ([0.0, 0.0], [4.0, 0.0], [8.0, 0.0], [0.0, 5.0]):
    g = constraint_value(np.array(x), mu, cov, rect, beta)
    print(f"ego at {x}: margin {g:+.3f}")

# Walk out along +x until the margin is zero, then sample the agent there.
lo, hi = 0.0, 50.0
for _ in range(80):
    mid = 0.5 * (lo + hi)
    lo, hi = (mid, hi) if constraint_value(np.array([mid, 0.0]), mu, cov, rect, beta) < 0 else (lo, mid)
x = np.array([hi, 0.0])
samples = np.random.default_rng(0).multivariate_normal(mu, cov, size=200_000)
freq = np.mean(rects_overlap(x - samples, rect))
print(f"boundary at x={hi:.3f}: empirical overlap {freq:.4f} <= 1-p = {1 - p:.2f}")

# Inflating the covariance only grows the region: a feasible point stays feasible at smaller scales.
for alpha in (0.25, 1.0, 4.0):
    print(f"alpha={alpha}: margin at boundary point {constraint_value(x, mu, alpha * cov, rect, beta):+.3f}")
