"""Augmented-Lagrangian NLP solver, the smoothed collision margin and gradient checks.

Problems have the form ``min f(x)`` subject to ``c(x) >= 0`` and optional
simple bounds on ``x``.  Constraints flagged ``soft`` are relaxed with a
non-negative slack carrying a linear-plus-quadratic penalty, so every inner
problem stays bounded and an infeasible instance still returns the least
violating iterate.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from uasmpc.errors import NumericError
from uasmpc.geometry import OverlapRect, inv_sqrt, zonotope_candidates

log = logging.getLogger(__name__)

SMOOTH_TAU = 1e-3


@dataclass
class NlpProblem:
    n: int
    objective: callable
    gradient: callable = None
    constraints: callable = None
    jacobian: callable = None
    exact_constraints: callable = None
    soft: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None

    def n_constraints(self, x):
        return 0 if self.constraints is None else len(self.constraints(x))


@dataclass
class SolveOptions:
    feas_tol: float = 1e-6
    stat_tol: float = 1e-5
    max_outer: int = 200
    max_inner: int = 500
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e9
    slack_weight: float = 1e4
    slack_linear_weight: float = 1e4
    fd_step: float = 1e-7


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    status: str
    inner_iterations: int = 0
    stationarity: float = np.inf
    multipliers: np.ndarray = None
    penalty: float = 0.0
    slack: np.ndarray = None
    violation_history: list = field(default_factory=list)

    @property
    def ok(self):
        return self.status == "optimal"


def _fd_gradient(fun, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _fd_jacobian(fun, x, h):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.stack(cols, axis=-1) if cols else np.zeros((0, 0))


def _check_finite(name, value, x):
    if not np.all(np.isfinite(value)):
        err = NumericError(f"{name} returned non-finite values at iterate {np.array2string(x, precision=6)}")
        err.iterate = np.array(x, copy=True)
        raise err


def solve(problem, x0, options=None, multipliers=None, penalty=None):
    """Minimise ``problem`` from ``x0``; returns a :class:`SolveReport`.

    ``multipliers`` and ``penalty`` warm start the outer loop.  When the
    starting point already satisfies the tolerances it is returned unchanged.
    """
    opt = options or SolveOptions()
    x0 = np.asarray(x0, dtype=float).copy()
    if x0.shape != (problem.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({problem.n},)")
    _check_finite("x0", x0, x0)
    n = problem.n

    f = problem.objective
    grad = problem.gradient or (lambda x: _fd_gradient(f, x, opt.fd_step))
    if problem.constraints is None:
        cons = lambda x: np.zeros(0)
        jac = lambda x: np.zeros((0, n))
    else:
        cons = problem.constraints
        jac = problem.jacobian or (lambda x: _fd_jacobian(cons, x, opt.fd_step))
    exact = problem.exact_constraints or cons

    c0 = np.asarray(cons(x0), dtype=float)
    _check_finite("constraints", c0, x0)
    m = c0.size
    soft = np.zeros(m, bool) if problem.soft is None else np.asarray(problem.soft, bool)
    soft_idx = np.flatnonzero(soft)
    ms = soft_idx.size

    lam = np.zeros(m) if multipliers is None else np.asarray(multipliers, float).copy()
    if lam.shape != (m,):
        lam = np.zeros(m)
    rho = opt.penalty_init if penalty is None else float(penalty)

    lo = np.full(n, -np.inf) if problem.lower is None else np.asarray(problem.lower, float)
    hi = np.full(n, np.inf) if problem.upper is None else np.asarray(problem.upper, float)
    x0 = np.clip(x0, lo, hi)
    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
    bounds += [(0.0, None)] * ms

    def split(y):
        return y[:n], y[n:]

    def relaxed(x, s):
        c = np.asarray(cons(x), dtype=float)
        if ms:
            c = c.copy()
            c[soft_idx] += s
        return c

    def merit(y, lam, rho):
        x, s = split(y)
        fx = f(x)
        c = relaxed(x, s)
        _check_finite("objective", fx, x)
        _check_finite("constraints", c, x)
        shifted = np.maximum(0.0, lam - rho * c)
        val = fx + opt.slack_weight * s @ s + opt.slack_linear_weight * s.sum()
        val += (shifted @ shifted - lam @ lam) / (2 * rho)
        gx = np.asarray(grad(x), dtype=float)
        _check_finite("gradient", gx, x)
        if m:
            J = np.asarray(jac(x), dtype=float)
            gx = gx - J.T @ shifted
            gs = 2 * opt.slack_weight * s + opt.slack_linear_weight - shifted[soft_idx]
        else:
            gs = np.zeros(0)
        return val, np.concatenate([gx, gs])

    def projected_grad(y, g):
        # scaled by the objective gradient so the test is unit free
        lo_all = np.concatenate([lo, np.zeros(ms)])
        hi_all = np.concatenate([hi, np.full(ms, np.inf)])
        pg = y - np.clip(y - g, lo_all, hi_all)
        if not pg.size:
            return 0.0
        scale = max(1.0, float(np.max(np.abs(grad(y[:n])))))
        return float(np.max(np.abs(pg))) / scale

    s0 = np.maximum(0.0, -c0[soft_idx]) if ms else np.zeros(0)
    y = np.concatenate([x0, s0])

    def violation(y):
        x, s = split(y)
        return float(max(0.0, -relaxed(x, s).min())) if m else 0.0

    # already converged (typical when warm started on unchanged inputs)
    _, g = merit(y, lam, rho)
    viol = violation(y)
    stat = projected_grad(y, g)
    history = []
    outer = 0
    inner_total = 0
    status = None
    comp = float(np.max(lam * np.abs(relaxed(*split(y))))) if m else 0.0
    if viol <= opt.feas_tol and stat <= opt.stat_tol and comp <= opt.stat_tol:
        status = "optimal"

    # violations within tolerance count as equal when enforcing monotone progress
    floor = opt.feas_tol
    accepted_y, accepted_viol = y, np.inf
    while status is None and outer < opt.max_outer:
        outer += 1
        res = minimize(
            merit,
            accepted_y,
            args=(lam, rho),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": opt.max_inner, "gtol": 1e-2 * opt.stat_tol, "ftol": 1e-16, "maxls": 40},
        )
        inner_total += int(res.nit)
        y_new = res.x
        viol_new = max(violation(y_new), floor)
        if viol_new <= accepted_viol:
            x_new, s_new = split(y_new)
            # gradient of the Lagrangian at the updated multipliers
            _, g = merit(y_new, lam, rho)
            stat = projected_grad(y_new, g)
            lam = np.maximum(0.0, lam - rho * relaxed(x_new, s_new))
            if viol_new > 0.25 * accepted_viol and viol_new > opt.feas_tol:
                rho = min(rho * opt.penalty_growth, opt.penalty_max)
            accepted_y, accepted_viol = y_new, viol_new
            history.append(viol_new)
            if viol_new <= opt.feas_tol and stat <= opt.stat_tol:
                status = "optimal"
        else:
            rho = min(rho * opt.penalty_growth, opt.penalty_max)
            if rho >= opt.penalty_max:
                break
        log.debug("outer %d viol %.3e stat %.3e rho %.1e", outer, accepted_viol, stat, rho)

    y = accepted_y
    x, s = split(y)
    cx = np.asarray(exact(x), dtype=float) if m else np.zeros(0)
    exact_viol = float(max(0.0, -cx.min())) if m else 0.0
    if status == "optimal" and exact_viol > opt.feas_tol:
        status = "degraded"
    if status is None:
        status = "degraded" if exact_viol > opt.feas_tol else "max_iter"
    return SolveReport(
        x=x.copy(),
        objective=float(f(x)),
        max_violation=exact_viol,
        iterations=outer,
        status=status,
        inner_iterations=inner_total,
        stationarity=stat,
        multipliers=lam,
        penalty=rho,
        slack=s.copy(),
        violation_history=history,
    )


def smooth_margin(z, V, beta, tau=SMOOTH_TAU, signed=False):
    """Softmin surrogate of the whitened collision margin and its gradient in ``z``.

    The exact distance is the minimum over the nine candidate projections; the
    surrogate replaces it by ``-tau * logsumexp(-d / tau)``, which undershoots
    by at most ``tau * ln 9``.  With ``signed=True`` points inside the
    parallelogram get the negative (softened) depth instead of zero, so the
    gradient still points outward there.  Returns ``(value, grad_z)`` batched
    over leading axes.
    """
    z = np.asarray(z, dtype=float)
    pts, valid = zonotope_candidates(z, V)
    diff = z[..., None, :] - pts
    d = np.linalg.norm(diff, axis=-1)
    unit = np.divide(diff, d[..., None], out=np.zeros_like(diff), where=d[..., None] > 0)

    inside = valid[..., 0]
    scores = np.where(valid, -d / tau, -np.inf)
    lse = logsumexp(scores, axis=-1)
    w = np.exp(scores - lse[..., None])
    dist = -tau * lse
    grad = np.sum(w[..., None] * unit, axis=-2)

    if signed and np.any(inside):
        edges = -d[..., 1:5] / tau
        lse_e = logsumexp(edges, axis=-1)
        we = np.exp(edges - lse_e[..., None])
        depth = -tau * lse_e
        grad_in = -np.sum(we[..., None] * unit[..., 1:5, :], axis=-2)
        dist = np.where(inside, -depth, dist)
        grad = np.where(inside[..., None], grad_in, grad)
    return dist - np.sqrt(beta), grad


def smooth_constraint_value(x, mu, cov, rect, beta, tau=SMOOTH_TAU, signed=False):
    """Smoothed counterpart of :func:`uasmpc.geometry.constraint_value`."""
    M = inv_sqrt(cov)
    z = np.einsum("...ij,...j->...i", M, np.asarray(x, float) - np.asarray(mu, float))
    r = rect.as_array() if isinstance(rect, OverlapRect) else np.asarray(rect, float)
    val, _ = smooth_margin(z, M * r[..., None, :], beta, tau=tau, signed=signed)
    return float(val) if np.ndim(val) == 0 else val


@dataclass
class GradientReport:
    max_rel_error: float
    objective_error: float
    constraint_error: float
    tol: float

    @property
    def ok(self):
        return self.max_rel_error <= self.tol


def _rel_error(analytic, numeric):
    analytic = np.atleast_2d(analytic)
    numeric = np.atleast_2d(numeric)
    if analytic.size == 0:
        return 0.0
    err = np.max(np.abs(analytic - numeric), axis=-1)
    scale = np.maximum(np.max(np.abs(numeric), axis=-1), np.max(np.abs(analytic), axis=-1))
    scale = np.maximum(scale, 1e-8)
    return float(np.max(err / scale))


def check_gradients(problem, x, h=1e-5, tol=1e-4):
    """Compare analytic derivatives with central differences of step ``h``.

    Errors are measured per function (the objective and each constraint row)
    as the largest absolute discrepancy over the largest derivative magnitude.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    obj_err = 0.0
    if problem.gradient is not None:
        obj_err = _rel_error(problem.gradient(x), _fd_gradient(problem.objective, x, h))
    con_err = 0.0
    if problem.constraints is not None and problem.jacobian is not None:
        con_err = _rel_error(problem.jacobian(x), _fd_jacobian(problem.constraints, x, h))
    return GradientReport(max(obj_err, con_err), obj_err, con_err, tol)
