"""Closed-loop rollouts: scenarios, reactive car-following agents and step logs."""

from dataclasses import dataclass, field, fields, replace
import json
import math
import time

import numpy as np

from uasmpc.errors import DomainError
from uasmpc.geometry import overlap_rect, rects_overlap
from uasmpc.planner import PlannerConfig, plan, shift_warm_start
from uasmpc.prediction import (
    DEFAULT_SIGMA2,
    AgentState,
    GmmPrediction,
    constant_velocity_predict,
    load_prediction_dump,
    scale_covariances,
)

ROUTE_SPACING = 0.1
ROUTE_WINDOW_POINTS = 1000
MAX_AGENT_OFFSET = 5.0
EGO_CORRIDOR = 2.0


class ScenarioError(DomainError):
    """A scenario file violates the schema or its invariants."""


class Route:
    """A polyline resampled at fixed arc-length spacing."""

    def __init__(self, name, waypoints, spacing=ROUTE_SPACING):
        self.name = name
        self.waypoints = np.asarray(waypoints, dtype=float)
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(cum[-1])
        n = max(int(math.floor(self.length / spacing + 1e-9)) + 1, 2)
        s = np.linspace(0.0, (n - 1) * spacing, n)
        if s[-1] < self.length - 1e-9:
            s = np.append(s, self.length)
        self.s = s
        self.points = np.stack([np.interp(s, cum, self.waypoints[:, 0]), np.interp(s, cum, self.waypoints[:, 1])], -1)
        self._cum = cum

    def point_at(self, s):
        s = np.clip(s, 0.0, self.length)
        return np.stack([np.interp(s, self._cum, self.waypoints[:, 0]), np.interp(s, self._cum, self.waypoints[:, 1])], -1)

    def tangent_at(self, s):
        i = int(np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._cum) - 2))
        d = self.waypoints[i + 1] - self.waypoints[i]
        return d / np.linalg.norm(d)

    def project(self, point):
        """Arc length, signed lateral offset (left positive) and distance of ``point``."""
        a = self.waypoints[:-1]
        seg = np.diff(self.waypoints, axis=0)
        L2 = np.sum(seg * seg, axis=1)
        t = np.clip(np.sum((point - a) * seg, axis=1) / L2, 0.0, 1.0)
        proj = a + t[:, None] * seg
        d = np.linalg.norm(point - proj, axis=1)
        i = int(np.argmin(d))
        rel = point - proj[i]
        lateral = (seg[i, 0] * rel[1] - seg[i, 1] * rel[0]) / np.sqrt(L2[i])
        return float(self._cum[i] + t[i] * np.sqrt(L2[i])), float(lateral), float(d[i])

    def window(self, s0, n_points=ROUTE_WINDOW_POINTS, spacing=ROUTE_SPACING):
        """Reference window starting at ``s0``: ``n_points`` samples ``spacing`` apart."""
        s = s0 + spacing * np.arange(n_points)
        s = s[s <= self.length + 1e-9]
        if s.size < 2:
            s = np.array([max(self.length - spacing, 0.0), self.length])
        return self.point_at(s)


@dataclass
class IdmParams:
    desired_speed: float
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    delta: float = 4.0
    stop_s: float = None

    def __post_init__(self):
        for f in ("time_headway", "min_gap", "max_accel", "comfort_decel", "delta"):
            if not getattr(self, f) > 0:
                raise DomainError(f"IDM parameter {f} must be positive")
        if self.desired_speed < 0:
            raise DomainError("IDM desired_speed must be non-negative")


@dataclass
class EgoSpec:
    state: AgentState
    route: str
    goal_s: float


@dataclass
class AgentSpec:
    state: AgentState
    route: str
    idm: dict = field(default_factory=dict)
    id: object = None


@dataclass
class Scenario:
    id: str
    dt: float
    duration: int
    expert_progress: float
    routes: dict
    ego: EgoSpec
    agents: list

    def __post_init__(self):
        self._paths = {name: Route(name, wp) for name, wp in self.routes.items()}

    def route(self, name):
        return self._paths[name]

    def to_dict(self):
        def state(s):
            return {"position": s.position.tolist(), "velocity": s.velocity.tolist(),
                    "heading": s.heading, "half_size": list(s.half_size)}

        ego = state(self.ego.state)
        ego.update(route=self.ego.route, goal_s=self.ego.goal_s)
        agents = []
        for a in self.agents:
            d = state(a.state)
            d["route"] = a.route
            if a.idm:
                d["idm"] = dict(a.idm)
            if a.id is not None:
                d["id"] = a.id
            agents.append(d)
        return {
            "id": self.id,
            "dt": self.dt,
            "duration": self.duration,
            "expert_progress": self.expert_progress,
            "routes": [{"name": n, "waypoints": np.asarray(w, float).tolist()} for n, w in self.routes.items()],
            "ego": ego,
            "agents": agents,
        }


def _field(d, key, where, kind=None):
    if key not in d:
        raise ScenarioError(f"missing field '{where}{key}'")
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ScenarioError(f"field '{where}{key}' has the wrong type")
    return v


def _vec(d, key, where):
    v = _field(d, key, where)
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"field '{where}{key}' must be a numeric [x, y] pair") from None
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ScenarioError(f"field '{where}{key}' must be a numeric [x, y] pair")
    return a


def _state(d, where):
    half = _vec(d, "half_size", where)
    if np.any(half <= 0):
        raise ScenarioError(f"field '{where}half_size' must be positive")
    heading = float(d.get("heading", 0.0))
    return AgentState(_vec(d, "position", where), _vec(d, "velocity", where), heading, tuple(half))


def scenario_from_dict(raw):
    """Validate a parsed scenario document; errors name the offending field."""
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a JSON object")
    sid = str(_field(raw, "id", ""))
    dt = float(_field(raw, "dt", "", (int, float)))
    duration = _field(raw, "duration", "", int)
    expert = float(_field(raw, "expert_progress", "", (int, float)))
    if dt <= 0:
        raise ScenarioError("field 'dt' must be positive")
    if duration < 1:
        raise ScenarioError("field 'duration' must be at least 1")
    if expert <= 0:
        raise ScenarioError("field 'expert_progress' must be positive")
    routes = {}
    for r, rd in enumerate(_field(raw, "routes", "", list)):
        where = f"routes[{r}]."
        name = str(_field(rd, "name", where))
        try:
            wp = np.asarray(_field(rd, "waypoints", where), dtype=float)
        except (TypeError, ValueError):
            raise ScenarioError(f"field '{where}waypoints' must be a list of [x, y] points") from None
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 2:
            raise ScenarioError(f"field '{where}waypoints' needs at least two [x, y] points")
        if np.any(np.linalg.norm(np.diff(wp, axis=0), axis=1) <= 0):
            raise ScenarioError(f"field '{where}waypoints' must have strictly increasing arc length")
        if name in routes:
            raise ScenarioError(f"field '{where}name' duplicates route '{name}'")
        routes[name] = wp
    if not routes:
        raise ScenarioError("field 'routes' must list at least one route")

    e = _field(raw, "ego", "", dict)
    ego = EgoSpec(_state(e, "ego."), str(_field(e, "route", "ego.")), float(_field(e, "goal_s", "ego.")))
    if ego.route not in routes:
        raise ScenarioError(f"field 'ego.route' names unknown route '{ego.route}'")

    agents = []
    for i, ad in enumerate(raw.get("agents", [])):
        where = f"agents[{i}]."
        route = str(_field(ad, "route", where))
        if route not in routes:
            raise ScenarioError(f"field '{where}route' names unknown route '{route}'")
        idm = ad.get("idm", {}) or {}
        known = {f.name for f in fields(IdmParams)}
        bad = set(idm) - known
        if bad:
            raise ScenarioError(f"field '{where}idm' has unknown keys {sorted(bad)}")
        agents.append(AgentSpec(_state(ad, where), route, dict(idm), ad.get("id")))

    sc = Scenario(sid, dt, duration, expert, routes, ego, agents)
    for spec, where in [(ego, "ego.")] + [(a, f"agents[{i}].") for i, a in enumerate(agents)]:
        _, _, dist = sc.route(spec.route).project(spec.state.position)
        if dist > MAX_AGENT_OFFSET:
            raise ScenarioError(f"field '{where}position' is {dist:.2f} m from route '{spec.route}' (limit {MAX_AGENT_OFFSET} m)")
    return sc


def load_scenario(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(raw)


def save_scenario(scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario.to_dict(), fh, indent=2)


@dataclass
class AgentTrack:
    """An agent constrained to move along its route by arc length."""

    route: Route
    s: float
    speed: float
    half_size: tuple
    idm: IdmParams
    id: object = None

    def state(self):
        t = self.route.tangent_at(self.s)
        return AgentState(self.route.point_at(self.s), self.speed * t, math.atan2(t[1], t[0]), self.half_size)


def idm_acceleration(speed, gap, leader_speed, params):
    """Intelligent-driver acceleration; ``gap=None`` means free road."""
    v0 = params.desired_speed
    if v0 <= 0:
        free = -np.inf if speed > 0 else 0.0
    else:
        free = 1.0 - (speed / v0) ** params.delta
    interact = 0.0
    if gap is not None:
        dv = speed - leader_speed
        s_star = params.min_gap + max(0.0, speed * params.time_headway
                                      + speed * dv / (2.0 * math.sqrt(params.max_accel * params.comfort_decel)))
        interact = (s_star / max(gap, 1e-3)) ** 2
    if not np.isfinite(free):
        return -params.comfort_decel
    return params.max_accel * (free - interact)


def step_idm(agent, leader_gap, leader_speed, params, dt):
    """Advance ``agent`` one step along its route under IDM; speed never drops below 0."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    a = idm_acceleration(agent.speed, leader_gap, leader_speed, params)
    v_new = max(agent.speed + a * dt, 0.0)
    if a > 0 and agent.speed <= params.desired_speed:
        v_new = min(v_new, params.desired_speed)
    s_new = min(agent.s + 0.5 * (agent.speed + v_new) * dt, agent.route.length)
    return replace(agent, s=s_new, speed=v_new)


def _leader(agent, others, ego_state, ego_half):
    """Gap and speed of the nearest leader ahead of ``agent`` on its route."""
    best_gap, best_speed = None, 0.0

    def consider(gap, speed):
        nonlocal best_gap, best_speed
        if best_gap is None or gap < best_gap:
            best_gap, best_speed = gap, speed

    for o in others:
        if o is agent or o.route is not agent.route or o.s <= agent.s:
            continue
        consider(o.s - agent.s - o.half_size[0] - agent.half_size[0], o.speed)
    s_e, lat, _ = agent.route.project(ego_state.position)
    if abs(lat) <= EGO_CORRIDOR and s_e > agent.s:
        along = float(ego_state.velocity @ agent.route.tangent_at(s_e))
        consider(s_e - agent.s - ego_half[0] - agent.half_size[0], max(along, 0.0))
    if agent.idm.stop_s is not None and agent.idm.stop_s > agent.s:
        consider(agent.idm.stop_s - agent.s - agent.half_size[0], 0.0)
    return best_gap, best_speed


def detect_collision(ego, agent):
    """Axis-aligned footprint overlap of two agents."""
    rect = overlap_rect(ego.half_size, agent.half_size)
    return bool(rects_overlap(agent.position - ego.position, rect))


class PlaybackPredictor:
    """Serve forecasts from a prediction dump keyed by (agent id, step)."""

    def __init__(self, records):
        self.table = {(str(aid), int(t)): pred for aid, t, pred, _ in records}

    @classmethod
    def from_file(cls, path):
        return cls(load_prediction_dump(path))

    def __call__(self, agent_id, t, state, N, dt):
        key = (str(agent_id), int(t))
        if key not in self.table:
            raise DomainError(f"prediction dump has no record for agent {agent_id} at step {t}")
        return self.table[key]


def constant_velocity_predictor(sigma2=DEFAULT_SIGMA2):
    def predict(agent_id, t, state, N, dt):
        return constant_velocity_predict(state, N, dt, sigma2)

    return predict


def _state_dict(state, s=None):
    d = {"position": state.position.tolist(), "velocity": state.velocity.tolist(),
         "heading": state.heading, "half_size": list(state.half_size)}
    if s is not None:
        d["s"] = s
    return d


@dataclass
class RolloutLog:
    scenario_id: str
    dt: float
    alpha: float
    seed: int
    records: list = field(default_factory=list)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        with open(path) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        if not records:
            raise DomainError(f"{path}: empty rollout log")
        r0 = records[0]
        return cls(r0["scenario_id"], r0["dt"], r0["alpha"], r0["seed"], records)

    @property
    def collided(self):
        return any(r["collisions"] or r["collisions_after"] for r in self.records)


def run_closed_loop(scenario, cfg=None, predictor=None, alpha=1.0, seed=0, speed_jitter=0.0,
                    record_timing=True, steps=None, stop_at_goal=False):
    """Simulate ``scenario`` with the planner in the loop.

    Each step predicts every agent, scales the covariances by ``alpha``, plans
    on a 100 m route window and applies the first control to the ego.  Agents
    follow IDM along their routes and treat the ego as a leader when it is in
    their lane.  ``speed_jitter`` (m/s) perturbs agents' desired speeds with a
    generator seeded by ``seed``.  The run lasts the full scenario duration so
    progress reflects speed; ``stop_at_goal`` ends it once the ego passes its
    goal arc length instead.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    cfg = cfg or PlannerConfig(dt=scenario.dt)
    predictor = predictor or constant_velocity_predictor()
    dt = cfg.dt
    rng = np.random.default_rng(seed)
    ego_route = scenario.route(scenario.ego.route)
    ego = AgentState(scenario.ego.state.position.copy(), scenario.ego.state.velocity.copy(),
                     scenario.ego.state.heading, scenario.ego.state.half_size)
    cruise = float(np.linalg.norm(ego.velocity))
    if cfg.ref_speed is None:
        cfg = replace(cfg, ref_speed=cruise)

    tracks = []
    for i, a in enumerate(scenario.agents):
        route = scenario.route(a.route)
        s, _, _ = route.project(a.state.position)
        speed = float(np.linalg.norm(a.state.velocity))
        params = dict(a.idm)
        params.setdefault("desired_speed", speed)
        if speed_jitter > 0:
            params["desired_speed"] = max(0.0, params["desired_speed"] + speed_jitter * rng.standard_normal())
        tracks.append(AgentTrack(route, s, speed, a.state.half_size, IdmParams(**params), a.id if a.id is not None else i))

    n_steps = steps if steps is not None else max(1, int(round(scenario.duration * scenario.dt / dt)))
    log = RolloutLog(scenario.id, dt, float(alpha), int(seed))
    warm = None
    for t in range(n_steps):
        states = [tr.state() for tr in tracks]
        preds = []
        for tr, st in zip(tracks, states):
            pred = predictor(tr.id, t, st, cfg.N, dt)
            preds.append(scale_covariances(pred, alpha))
        s_ego, _, _ = ego_route.project(ego.position)
        window = ego_route.window(s_ego)
        t0 = time.perf_counter()
        result = plan(ego, states, preds, window, cfg, warm_start=warm)
        solve_time = time.perf_counter() - t0
        u = result.first_control.copy()

        collisions = [tr.id for tr, st in zip(tracks, states) if detect_collision(ego, st)]
        new_pos = ego.position + dt * u
        heading = math.atan2(u[1], u[0]) if np.linalg.norm(u) > 0.1 else ego.heading
        new_ego = AgentState(new_pos, u, heading, ego.half_size)

        new_tracks = []
        for tr in tracks:
            gap, lead_v = _leader(tr, tracks, ego, ego.half_size)
            new_tracks.append(step_idm(tr, gap, lead_v, tr.idm, dt))
        after = [tr.state() for tr in new_tracks]
        collisions_after = [tr.id for tr, st in zip(new_tracks, after) if detect_collision(new_ego, st)]
        s_after, _, _ = ego_route.project(new_pos)

        rec = {
            "scenario_id": scenario.id,
            "dt": dt,
            "alpha": float(alpha),
            "seed": int(seed),
            "step": t,
            "time": round(t * dt, 9),
            "ego": _state_dict(ego, s_ego),
            "control": u.tolist(),
            "ego_after": _state_dict(new_ego, s_after),
            "agents": [dict(_state_dict(st, tr.s), id=tr.id) for tr, st in zip(tracks, states)],
            "predictions": [dict(p.to_dict(), id=tr.id) for tr, p in zip(tracks, preds)],
            "plan": {
                "status": result.status,
                "iterations": result.iterations,
                "inner_iterations": result.inner_iterations,
                "cost": result.cost,
                "min_margin": result.min_margin if np.isfinite(result.min_margin) else None,
                "agents": [tracks[i].id for i in result.agent_indices],
                "states": result.states.tolist(),
            },
            "collisions": collisions,
            "collisions_after": collisions_after,
            "goal_reached": bool(s_after >= scenario.ego.goal_s),
        }
        if record_timing:
            rec["solve_time"] = solve_time
        log.records.append(rec)

        n_modes = result.params.n_modes
        warm = shift_warm_start(result, n_modes)
        ego, tracks = new_ego, new_tracks
        if stop_at_goal and s_after >= scenario.ego.goal_s:
            break
    return log
