"""Self-checks of the keep-out geometry against brute force and sampling."""

from dataclasses import dataclass

import numpy as np

from uasmpc.geometry import OverlapRect, chi2_quantile_2dof, constraint_value, dist_to_zonotope, inv_sqrt, rects_overlap

SWEEP_ALPHAS = (1 / 4, 1 / 3, 1 / 2, 1, 2, 3, 4, 5)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_covariance(rng, lo=0.05, hi=4.0):
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    U = np.array([[c, -s], [s, c]])
    return U @ np.diag(rng.uniform(lo, hi, 2)) @ U.T


def random_rect(rng):
    return OverlapRect(rng.uniform(0.5, 5.0), rng.uniform(0.3, 2.5))


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


def brute_force_distance(z, V, n=400, refine=60):
    """Distance from ``z`` to the parallelogram ``{V s : |s|_inf <= 1}`` by dense edge sampling.

    Inside points (found with an orientation test on the four edges) get 0.
    Each edge is sampled on ``n`` points and the best sample is refined with a
    ternary search, which is exact for the convex distance along a segment.
    """
    v1, v2 = V[:, 0], V[:, 1]
    corners = np.array([v1 + v2, -v1 + v2, -v1 - v2, v1 - v2])
    if _cross(corners[1] - corners[0], corners[2] - corners[1]) < 0:
        corners = corners[::-1]
    edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
    if all(_cross(b - a, z - a) >= 0 for a, b in edges):
        return 0.0
    best = np.inf
    ts = np.linspace(0.0, 1.0, n)
    for a, b in edges:
        pts = a + ts[:, None] * (b - a)
        d = np.linalg.norm(pts - z, axis=1)
        i = int(np.argmin(d))
        lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, n - 1)]
        for _ in range(refine):
            m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            if np.linalg.norm(a + m1 * (b - a) - z) < np.linalg.norm(a + m2 * (b - a) - z):
                hi = m2
            else:
                lo = m1
        best = min(best, np.linalg.norm(a + 0.5 * (lo + hi) * (b - a) - z), d[i])
    return float(best)


def check_distance(n=1000, seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        cov = random_covariance(rng)
        rect = random_rect(rng)
        V = inv_sqrt(cov) * rect.as_array()
        z = rng.normal(scale=6.0, size=2)
        d, _ = dist_to_zonotope(z, V)
        worst = max(worst, abs(d - brute_force_distance(z, V)))
    return CheckResult("closed-form distance vs brute force", worst <= tol, f"max error {worst:.2e} over {n} cases (tol {tol:g})")


def boundary_point(rng, mu, cov, rect, beta):
    """A point with margin 0: bisect along a random ray from the agent mean."""
    u = rng.normal(size=2)
    u /= np.linalg.norm(u)
    lo, hi = 0.0, 1.0
    while constraint_value(mu + hi * u, mu, cov, rect, beta) < 0:
        hi *= 2
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if constraint_value(mu + mid * u, mu, cov, rect, beta) < 0:
            lo = mid
        else:
            hi = mid
    return mu + hi * u


def check_chance_constraint(n_configs=50, n_samples=100_000, levels=(0.8, 0.9, 0.95), seed=1):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for p in levels:
        beta = chi2_quantile_2dof(p)
        for _ in range(n_configs):
            cov = random_covariance(rng)
            rect = random_rect(rng)
            mu = rng.normal(scale=3.0, size=2)
            x = boundary_point(rng, mu, cov, rect, beta)
            o = rng.multivariate_normal(mu, cov, size=n_samples)
            freq = float(np.mean(rects_overlap(x - o, rect)))
            bound = (1 - p) + 3 * np.sqrt(p * (1 - p) / n_samples)
            worst = max(worst, freq - bound)
    return CheckResult("collision frequency at zero margin", bool(worst <= 0),
                       f"worst excess over (1-p)+3se: {worst:+.4f}")


def check_nesting(n=10_000, seed=2, p=0.9):
    rng = np.random.default_rng(seed)
    beta = chi2_quantile_2dof(p)
    bad = 0
    alphas = np.array(SWEEP_ALPHAS)
    for _ in range(n):
        cov = random_covariance(rng)
        rect = random_rect(rng)
        x = rng.normal(scale=5.0, size=2)
        a_small, a_big = np.sort(rng.choice(alphas, 2, replace=False))
        if constraint_value(x, 0, a_big * cov, rect, beta) >= 0 > constraint_value(x, 0, a_small * cov, rect, beta):
            bad += 1
    return CheckResult("keep-out nesting across alpha", bad == 0, f"{bad} counterexamples in {n} trials")


def run_all(quick=False):
    if quick:
        return [check_distance(200), check_chance_constraint(10, 20_000), check_nesting(2000)]
    return [check_distance(), check_chance_constraint(), check_nesting()]
