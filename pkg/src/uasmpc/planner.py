"""Mode-coupled stochastic MPC for a velocity-controlled ego vehicle.

The ego position integrates its velocity command, ``x_{k+1} = x_k + dt * u_k``.
Controls follow an affine feedback policy on agent positions: the first
control is shared by every mode and reacts to the observed agent positions,
later controls are mode specific and react to the predicted means.  Every
(agent, mode, step) triple carries an exact chance constraint from
:mod:`uasmpc.geometry`.

Internally everything is shifted so the ego sits at the origin; results are
reported in the world frame.
"""

from dataclasses import asdict, dataclass, field, fields
import time

import numpy as np

from uasmpc.errors import DomainError
from uasmpc.geometry import chi2_quantile_2dof, constraint_value, dist_to_zonotope, inv_sqrt, overlap_rect
from uasmpc.prediction import AgentState
from uasmpc.solver import NlpProblem, SolveOptions, smooth_margin, solve

MAX_ROUTE_OFFSET = 50.0
LATERAL_NUDGE = 0.05

HORIZON_PRESETS = {"short": (10, 0.3), "long": (10, 0.8)}


class EgoState(AgentState):
    """Ego position and velocity; footprint fields as for other agents."""


def _mat(v):
    m = np.asarray(v, dtype=float)
    return np.diag(m) if m.ndim == 1 else m


@dataclass
class PlannerConfig:
    N: int = 10
    dt: float = 0.3
    v_min: tuple = (-15.0, -15.0)
    v_max: tuple = (15.0, 15.0)
    a_min: tuple = (-1.5, -1.5)
    a_max: tuple = (1.5, 1.5)
    p: float = 0.9
    Q: np.ndarray = field(default_factory=lambda: np.eye(2))
    R1w: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(2))
    R2w: np.ndarray = field(default_factory=lambda: np.eye(2))
    max_agents: int = 8
    agent_radius: float = 50.0
    free_gains: bool = False
    gain_ridge: float = 1e-6
    ref_speed: float = None
    tau: float = 1e-3
    solver: SolveOptions = field(default_factory=SolveOptions)

    def __post_init__(self):
        self.v_min = np.asarray(self.v_min, dtype=float)
        self.v_max = np.asarray(self.v_max, dtype=float)
        self.a_min = np.asarray(self.a_min, dtype=float)
        self.a_max = np.asarray(self.a_max, dtype=float)
        self.Q, self.R1w, self.R2w = _mat(self.Q), _mat(self.R1w), _mat(self.R2w)
        if isinstance(self.solver, dict):
            self.solver = SolveOptions(**self.solver)
        if self.N < 1 or self.dt <= 0:
            raise DomainError("need N >= 1 and dt > 0")
        if np.any(self.v_min >= self.v_max) or np.any(self.a_min >= self.a_max):
            raise DomainError("lower bounds must be strictly below upper bounds")
        if not 0 < self.p < 1:
            raise DomainError("coverage level p must lie in (0, 1)")
        for name in ("Q", "R1w", "R2w"):
            W = getattr(self, name)
            if W.shape != (2, 2) or not np.allclose(W, W.T) or np.linalg.eigvalsh(W).min() <= 0:
                raise DomainError(f"{name} must be a symmetric positive definite 2x2 matrix")

    @property
    def beta(self):
        return chi2_quantile_2dof(self.p)

    @classmethod
    def preset(cls, name, **overrides):
        N, dt = HORIZON_PRESETS[name]
        return cls(N=N, dt=dt, **overrides)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, SolveOptions):
                v = asdict(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown planner config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PolicyParameters:
    """Feedforward terms and feedback gains.

    ``h0`` (2,) and ``K0`` (A, 2, 2) define the shared first control; ``h``
    (modes, N-1, 2) and ``K`` (modes, N-1, A, 2, 2) the later, mode-specific
    ones.
    """

    h0: np.ndarray
    K0: np.ndarray
    h: np.ndarray
    K: np.ndarray

    @classmethod
    def zeros(cls, n_agents, n_modes, N):
        return cls(np.zeros(2), np.zeros((n_agents, 2, 2)), np.zeros((n_modes, N - 1, 2)),
                   np.zeros((n_modes, N - 1, n_agents, 2, 2)))

    @property
    def n_modes(self):
        return self.h.shape[0]

    @property
    def n_agents(self):
        return self.K0.shape[0]

    def to_vector(self, free_gains=False):
        parts = [self.h0.ravel(), self.h.ravel()]
        if free_gains:
            parts += [self.K0.ravel(), self.K.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, theta, n_agents, n_modes, N, free_gains=False, gains=None):
        theta = np.asarray(theta, dtype=float)
        nh = 2 * n_modes * (N - 1)
        h0 = theta[:2].copy()
        h = theta[2:2 + nh].reshape(n_modes, N - 1, 2).copy()
        if free_gains:
            nk0 = 4 * n_agents
            K0 = theta[2 + nh:2 + nh + nk0].reshape(n_agents, 2, 2).copy()
            K = theta[2 + nh + nk0:].reshape(n_modes, N - 1, n_agents, 2, 2).copy()
        elif gains is not None:
            K0, K = gains
        else:
            K0 = np.zeros((n_agents, 2, 2))
            K = np.zeros((n_modes, N - 1, n_agents, 2, 2))
        return cls(h0, K0, h, K)


@dataclass
class Rollout:
    states: np.ndarray    # (modes, N+1, 2), world frame
    controls: np.ndarray  # (modes, N, 2)


@dataclass
class PlanResult:
    first_control: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    cost: float
    margins: np.ndarray
    constraint_values: np.ndarray
    status: str
    iterations: int
    params: PolicyParameters
    mode_probs: np.ndarray
    reference: tuple
    agent_indices: list
    theta: np.ndarray = None
    multipliers: np.ndarray = None
    penalty: float = None
    inner_iterations: int = 0
    solve_time: float = 0.0

    @property
    def degraded(self):
        return self.status != "optimal"

    @property
    def min_margin(self):
        return float(self.margins.min()) if self.margins.size else np.inf


def _stack_predictions(preds, N):
    if not preds:
        return np.ones(1), np.zeros((0, 1, N, 2)), np.zeros((0, 1, N, 2, 2))
    n_modes = {p.n_modes for p in preds}
    if len(n_modes) != 1:
        raise DomainError(f"all agents must share the mode count, got {sorted(n_modes)}")
    for p in preds:
        if p.horizon < N:
            raise DomainError(f"prediction horizon {p.horizon} shorter than planning horizon {N}")
    means = np.stack([p.means[:, :N] for p in preds])
    covs = np.stack([p.covs[:, :N] for p in preds])
    probs = np.mean([p.probs for p in preds], axis=0)
    return probs / probs.sum(), means, covs


def rollout(params, ego, nev_states, preds, cfg):
    """Controls and Euler-integrated positions of every mode under ``params``."""
    N, dt = cfg.N, cfg.dt
    _, means, _ = _stack_predictions(preds, N)
    A = len(nev_states)
    if means.shape[0] != A or params.n_agents != A:
        raise DomainError("parameters, agent states and predictions disagree on the agent count")
    n_modes = params.n_modes
    if A and means.shape[1] != n_modes:
        raise DomainError("policy mode count differs from the prediction mode count")
    origin = ego.position
    o_rel = np.array([s.position for s in nev_states]).reshape(A, 2) - origin
    mu_rel = means - origin  # (A, modes, N, 2)

    u = np.empty((n_modes, N, 2))
    u[:, 0] = params.h0 + np.einsum("iab,ib->a", params.K0, o_rel)
    if N > 1:
        fb = np.einsum("jkiab,ijkb->jka", params.K, mu_rel[:, :, 1:N]) if A else 0.0
        u[:, 1:] = params.h + fb
    x = np.zeros((n_modes, N + 1, 2))
    x[:, 1:] = dt * np.cumsum(u, axis=1)
    return Rollout(states=x + origin, controls=u)


def cost(ro, x_ref, u_ref, mode_probs, cfg):
    """Expected tracking, control-tracking and smoothness cost over the modes."""
    x_ref = np.asarray(x_ref, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    N = ro.controls.shape[1]
    if x_ref.shape != (N + 1, 2) or u_ref.shape != (N, 2):
        raise DomainError("reference must have N+1 states and N controls")
    if len(mode_probs) != ro.controls.shape[0]:
        raise DomainError("mode probabilities do not match the rollout")
    total = 0.0
    for j, pj in enumerate(mode_probs):
        dx = ro.states[j, 1:] - x_ref[1:]
        du = ro.controls[j] - u_ref
        dd = np.diff(ro.controls[j], axis=0)
        c = np.einsum("ka,ab,kb->", dx, cfg.Q, dx)
        c += np.einsum("ka,ab,kb->", du, cfg.R1w, du)
        c += np.einsum("ka,ab,kb->", dd, cfg.R2w, dd)
        total += pj * c
    return float(total)


def _bound_entries(u, v_prev, cfg):
    """Velocity and velocity-change bound margins for one control sequence."""
    d = np.diff(np.concatenate([v_prev[None], u]), axis=0)
    return np.concatenate([u - cfg.v_min, cfg.v_max - u, d - cfg.a_min, cfg.a_max - d], axis=1).ravel()


def constraints(ro, ego, nev_states, preds, cfg):
    """Exact constraint vector; every entry is >= 0 when satisfied.

    Layout: bound entries of the shared first control (8), bound entries of
    the later controls of each mode (8 per step), then collision margins
    ordered by (agent, mode, step).  With one mode this gives ``8N + N*A``.
    """
    n_modes, N = ro.controls.shape[:2]
    parts = [_bound_entries(ro.controls[0, :1], ego.velocity, cfg)]
    for j in range(n_modes):
        if N > 1:
            parts.append(_bound_entries(ro.controls[j, 1:], ro.controls[j, 0], cfg))
    parts.append(collision_margins(ro, ego, nev_states, preds, cfg).ravel())
    return np.concatenate(parts)


def collision_margins(ro, ego, nev_states, preds, cfg):
    """Exact margins with shape (agents, modes, N)."""
    _, means, covs = _stack_predictions(preds, cfg.N)
    A = len(nev_states)
    if A == 0:
        return np.zeros((0, ro.controls.shape[0], cfg.N))
    r = np.array([overlap_rect(ego.half_size, s.half_size).as_array() for s in nev_states])
    x = ro.states[None, :, 1:]
    return constraint_value(x, means, covs, r[:, None, None, :], cfg.beta)


def _project_to_route(route, point):
    """Arc length, projected point and distance of ``point`` on a polyline."""
    a = route[:-1]
    seg = route[1:] - a
    L2 = np.sum(seg * seg, axis=1)
    t = np.clip(np.sum((point - a) * seg, axis=1) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    proj = a + t[:, None] * seg
    d = np.linalg.norm(point - proj, axis=1)
    i = int(np.argmin(d))
    cum = np.concatenate([[0.0], np.cumsum(np.sqrt(L2))])
    return cum[i] + t[i] * np.sqrt(L2[i]), proj[i], float(d[i])


def route_point(route, s):
    """Points at arc lengths ``s`` along a polyline, clamped to its ends."""
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    return np.stack([np.interp(s, cum, route[:, 0]), np.interp(s, cum, route[:, 1])], axis=-1)


def build_reference(route, ego, cfg):
    """Reference positions (N+1, 2) and finite-difference controls (N, 2).

    The ego is projected onto the route and the reference advances along it at
    the current speed.  When ``cfg.ref_speed`` is set the speed instead ramps
    toward it by at most half the per-step velocity-change bound.
    """
    route = np.asarray(route, dtype=float)
    if route.ndim != 2 or route.shape[0] < 2:
        raise DomainError("route needs at least two waypoints")
    s0, _, dist = _project_to_route(route, ego.position)
    if dist > MAX_ROUTE_OFFSET:
        raise DomainError(f"ego is {dist:.1f} m from the route (limit {MAX_ROUTE_OFFSET} m)")
    v_cap = float(np.min(cfg.v_max))
    v0 = float(np.clip(np.linalg.norm(ego.velocity), 0.0, v_cap))
    k = np.arange(cfg.N)
    if cfg.ref_speed is None:
        speeds = np.full(cfg.N, v0)
    else:
        target = float(np.clip(cfg.ref_speed, 0.0, v_cap))
        step = 0.5 * float(np.min(cfg.a_max))
        speeds = v0 + np.clip(target - v0, -(k + 1) * step, (k + 1) * step)
    s = s0 + np.concatenate([[0.0], np.cumsum(speeds * cfg.dt)])
    x_ref = route_point(route, s)
    u_ref = np.diff(x_ref, axis=0) / cfg.dt
    return x_ref, u_ref


class _PlanNlp:
    """Affine control map, quadratic cost and constraint evaluation for one plan call."""

    def __init__(self, ego, nev_states, preds, x_ref, u_ref, cfg, gains=None):
        self.cfg = cfg
        N, dt = cfg.N, cfg.dt
        self.probs, means, covs = _stack_predictions(preds, N)
        A = len(nev_states)
        n_modes = self.probs.size
        self.A, self.n_modes = A, n_modes
        origin = ego.position
        self.origin = origin
        self.v_prev = ego.velocity
        o_rel = np.array([s.position for s in nev_states]).reshape(A, 2) - origin
        mu_rel = means - origin

        nh = 2 + 2 * n_modes * (N - 1)
        nk = 4 * A + 4 * n_modes * (N - 1) * A if cfg.free_gains else 0
        self.n = nh + nk
        Gu = np.zeros((n_modes, N, 2, self.n))
        u_off = np.zeros((n_modes, N, 2))
        Gu[:, 0, 0, 0] = 1.0
        Gu[:, 0, 1, 1] = 1.0
        for j in range(n_modes):
            for k in range(1, N):
                c = 2 + 2 * (j * (N - 1) + k - 1)
                Gu[j, k, 0, c] = 1.0
                Gu[j, k, 1, c + 1] = 1.0
        if cfg.free_gains:
            base = nh
            for i in range(A):
                for j in range(n_modes):
                    Gu[j, 0, 0, base:base + 2] = o_rel[i]
                    Gu[j, 0, 1, base + 2:base + 4] = o_rel[i]
                base += 4
            for j in range(n_modes):
                for k in range(1, N):
                    for i in range(A):
                        Gu[j, k, 0, base:base + 2] = mu_rel[i, j, k]
                        Gu[j, k, 1, base + 2:base + 4] = mu_rel[i, j, k]
                        base += 4
        elif A and gains is not None:
            K0, K = gains
            u_off[:, 0] = np.einsum("iab,ib->a", K0, o_rel)
            u_off[:, 1:] = np.einsum("jkiab,ijkb->jka", K, mu_rel[:, :, 1:N])
        self.Gu, self.u_off = Gu, u_off
        self.Gx = dt * np.cumsum(Gu, axis=1)            # positions at steps 1..N
        self.x_off = dt * np.cumsum(u_off, axis=1)

        # cost as a weighted least-squares residual  ||A theta + b||^2
        Lq = np.linalg.cholesky(self.cfg.Q).T
        L1 = np.linalg.cholesky(self.cfg.R1w).T
        L2 = np.linalg.cholesky(self.cfg.R2w).T
        rows, rhs = [], []
        x_rel = x_ref - origin
        for j in range(n_modes):
            w = np.sqrt(self.probs[j])
            rows.append(w * np.einsum("ab,kbn->kan", Lq, self.Gx[j]).reshape(-1, self.n))
            rhs.append(w * ((self.x_off[j] - x_rel[1:]) @ Lq.T).ravel())
            rows.append(w * np.einsum("ab,kbn->kan", L1, Gu[j]).reshape(-1, self.n))
            rhs.append(w * ((u_off[j] - u_ref) @ L1.T).ravel())
            if N > 1:
                dG = np.diff(Gu[j], axis=0)
                rows.append(w * np.einsum("ab,kbn->kan", L2, dG).reshape(-1, self.n))
                rhs.append(w * (np.diff(u_off[j], axis=0) @ L2.T).ravel())
        if cfg.free_gains and nk:
            rows.append(np.sqrt(cfg.gain_ridge) * np.eye(self.n)[nh:])
            rhs.append(np.zeros(nk))
        self.Ac = np.concatenate(rows)
        self.bc = np.concatenate(rhs)

        # linear bound constraints  Bl theta + bl >= 0
        bl_rows, bl_rhs = [], []

        def add_bounds(G, off, G_prev, off_prev):
            d_G = np.concatenate([G_prev[None], G])
            d_off = np.concatenate([off_prev[None], off])
            dG = np.diff(d_G, axis=0)
            doff = np.diff(d_off, axis=0)
            for sign, Gm, offm, lim in (
                (1.0, G, off, -cfg.v_min), (-1.0, G, off, cfg.v_max),
                (1.0, dG, doff, -cfg.a_min), (-1.0, dG, doff, cfg.a_max),
            ):
                bl_rows.append(sign * Gm)
                bl_rhs.append(sign * offm + lim)

        zero_G = np.zeros((2, self.n))
        add_bounds(Gu[0, :1], u_off[0, :1], zero_G, self.v_prev)
        for j in range(n_modes):
            if N > 1:
                add_bounds(Gu[j, 1:], u_off[j, 1:], Gu[j, 0], u_off[j, 0])
        # interleave per step to match `constraints`: [u-vmin, vmax-u, d-amin, amax-d] per row
        self.Bl, self.bl = self._interleave(bl_rows, bl_rhs)

        # collision data
        self.beta = cfg.beta
        if A:
            r = np.array([overlap_rect(ego.half_size, s.half_size).as_array() for s in nev_states])
            M = inv_sqrt(covs)                              # (A, modes, N, 2, 2)
            self.M = M
            self.V = M * r[:, None, None, None, :]
            self.MG = np.einsum("ijkab,jkbn->ijkan", M, self.Gx)
            self.z_off = np.einsum("ijkab,ijkb->ijka", M, self.x_off[None] - mu_rel)
        self.n_bounds = self.Bl.shape[0]
        self.n_collision = A * n_modes * N
        self._cache_key = None

    @staticmethod
    def _interleave(rows, rhs):
        out_rows, out_rhs = [], []
        for g in range(0, len(rows), 4):
            blocks = rows[g:g + 4]
            offs = rhs[g:g + 4]
            steps = blocks[0].shape[0]
            for k in range(steps):
                for b, o in zip(blocks, offs):
                    out_rows.append(b[k])
                    out_rhs.append(o[k])
        return np.concatenate(out_rows).reshape(-1, blocks[0].shape[-1]), np.concatenate(out_rhs)

    def objective(self, theta):
        r = self.Ac @ theta + self.bc
        return float(r @ r)

    def gradient(self, theta):
        return 2.0 * self.Ac.T @ (self.Ac @ theta + self.bc)

    def _collision(self, theta):
        key = theta.tobytes()
        if key != self._cache_key:
            z = np.einsum("ijkan,n->ijka", self.MG, theta) + self.z_off
            val, gz = smooth_margin(z, self.V, self.beta, tau=self.cfg.tau, signed=True)
            self._cache = (val.ravel(), np.einsum("ijka,ijkan->ijkn", gz, self.MG).reshape(-1, self.n))
            self._cache_key = key
        return self._cache

    def constraints(self, theta):
        lin = self.Bl @ theta + self.bl
        if not self.A:
            return lin
        return np.concatenate([lin, self._collision(theta)[0]])

    def jacobian(self, theta):
        if not self.A:
            return self.Bl
        return np.concatenate([self.Bl, self._collision(theta)[1]])

    def exact_constraints(self, theta):
        lin = self.Bl @ theta + self.bl
        if not self.A:
            return lin
        z = np.einsum("ijkan,n->ijka", self.MG, theta) + self.z_off
        dist, _ = dist_to_zonotope(z, self.V)
        return np.concatenate([lin, (dist - np.sqrt(self.beta)).ravel()])

    def problem(self):
        soft = np.zeros(self.n_bounds + self.n_collision, dtype=bool)
        soft[self.n_bounds:] = True
        return NlpProblem(
            n=self.n,
            objective=self.objective,
            gradient=self.gradient,
            constraints=self.constraints,
            jacobian=self.jacobian,
            exact_constraints=self.exact_constraints,
            soft=soft,
        )

    def controls(self, theta):
        return np.einsum("jkan,n->jka", self.Gu, theta) + self.u_off


def select_agents(ego, nev_states, cfg):
    """Indices of the ``cfg.max_agents`` nearest agents within ``cfg.agent_radius``."""
    if not nev_states:
        return []
    d = np.array([np.linalg.norm(s.position - ego.position) for s in nev_states])
    order = np.argsort(d, kind="stable")
    return [int(i) for i in order if d[i] <= cfg.agent_radius][: cfg.max_agents]


def build_nlp(ego, nev_states, preds, x_ref, u_ref, cfg):
    """Assemble the planning NLP for already selected agents."""
    return _PlanNlp(ego, list(nev_states), list(preds), np.asarray(x_ref, float), np.asarray(u_ref, float), cfg)


def shift_warm_start(result, n_modes=None):
    """Shift a previous plan one step forward to seed the next solve."""
    h_prev = result.params.h
    n_modes = h_prev.shape[0] if n_modes is None else n_modes
    best = int(np.argmax(result.mode_probs))
    if h_prev.shape[1] == 0:
        return result.params.h0.copy()
    h0 = h_prev[best, 0]
    h = np.concatenate([h_prev[:, 1:], h_prev[:, -1:]], axis=1)
    if h.shape[0] != n_modes:
        h = np.repeat(h[best:best + 1], n_modes, axis=0)
    return np.concatenate([h0, h.ravel()])


def _break_symmetry(theta0, nlp, u_ref, cfg, speed=LATERAL_NUDGE):
    """Add a small leftward velocity to later controls of a start point.

    An agent exactly on the reference line puts the start point on the medial
    axis of the keep-out parallelogram where the lateral gradient vanishes.
    Only applied when some collision margin is violated at the start.
    """
    if nlp.n_collision == 0 or cfg.N < 2:
        return theta0
    if np.min(nlp.exact_constraints(theta0)[nlp.n_bounds:]) >= 0:
        return theta0
    d = u_ref[1:] if np.linalg.norm(u_ref) > 0 else np.tile([1.0, 0.0], (cfg.N - 1, 1))
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    d = np.where(norm > 0, d / np.where(norm > 0, norm, 1.0), [1.0, 0.0])
    left = np.stack([-d[:, 1], d[:, 0]], axis=1)
    out = theta0.copy()
    nh = 2 * nlp.n_modes * (cfg.N - 1)
    out[2:2 + nh] += speed * np.tile(left, (nlp.n_modes, 1, 1)).ravel()
    return out


def plan(ego, nev_states, preds, route, cfg, warm_start=None):
    """Solve one receding-horizon problem.

    ``preds`` aligns with ``nev_states``.  ``warm_start`` may be a previous
    :class:`PlanResult` on the same inputs (reused with its multipliers) or a
    raw decision vector.  A solver failure never raises; the returned result
    carries the best iterate and a non-``optimal`` status.
    """
    if route is None or len(route) < 2:
        raise DomainError("planning needs a reference route")
    if len(preds) != len(nev_states):
        raise DomainError("need one prediction per agent")
    t_start = time.perf_counter()
    x_ref, u_ref = build_reference(route, ego, cfg)
    idx = select_agents(ego, nev_states, cfg)
    sel_states = [nev_states[i] for i in idx]
    sel_preds = [preds[i] for i in idx]
    nlp = build_nlp(ego, sel_states, sel_preds, x_ref, u_ref, cfg)

    multipliers = penalty = None
    theta0 = None
    if isinstance(warm_start, PlanResult) and warm_start.theta is not None and warm_start.theta.size == nlp.n:
        theta0 = warm_start.theta
        if warm_start.multipliers is not None and warm_start.multipliers.size == nlp.n_bounds + nlp.n_collision:
            multipliers, penalty = warm_start.multipliers, warm_start.penalty
    elif warm_start is not None and not isinstance(warm_start, PlanResult):
        w = np.asarray(warm_start, dtype=float)
        if w.size == nlp.n:
            theta0 = w
    if theta0 is None:
        theta0 = np.zeros(nlp.n)
        theta0[:2] = np.clip(u_ref[0], ego.velocity + cfg.a_min, ego.velocity + cfg.a_max)
        nh = 2 * nlp.n_modes * (cfg.N - 1)
        theta0[2:2 + nh] = np.tile(u_ref[1:], (nlp.n_modes, 1, 1)).ravel()
        theta0 = _break_symmetry(theta0, nlp, u_ref, cfg)
    elif not isinstance(warm_start, PlanResult):
        theta0 = _break_symmetry(theta0, nlp, u_ref, cfg)

    report = solve(nlp.problem(), theta0, cfg.solver, multipliers=multipliers, penalty=penalty)
    theta = report.x
    params = PolicyParameters.from_vector(theta, len(idx), nlp.n_modes, cfg.N, cfg.free_gains)
    ro = rollout(params, ego, sel_states, sel_preds, cfg)
    margins = collision_margins(ro, ego, sel_states, sel_preds, cfg)
    cvals = constraints(ro, ego, sel_states, sel_preds, cfg)
    return PlanResult(
        first_control=ro.controls[0, 0].copy(),
        states=ro.states,
        controls=ro.controls,
        cost=nlp.objective(theta),
        margins=margins,
        constraint_values=cvals,
        status=report.status,
        iterations=report.iterations,
        params=params,
        mode_probs=nlp.probs,
        reference=(x_ref, u_ref),
        agent_indices=idx,
        theta=theta,
        multipliers=report.multipliers,
        penalty=report.penalty,
        inner_iterations=report.inner_iterations,
        solve_time=time.perf_counter() - t_start,
    )
