"""Closed-loop planning metrics and the aggregate run score."""

from dataclasses import dataclass, asdict
import math

import numpy as np

from uasmpc.errors import DomainError
from uasmpc.geometry import overlap_rect

TTC_HORIZON = 10.0
TTC_SUBSTEPS = 10
SCORE_WEIGHTS = (0.5, 0.3, 0.2)
TTC_TARGET = 3.0
JERK_COMFORT = 1.0
CSV_FIELDS = ("id", "alpha", "progress", "jerk", "min_ttc", "collided", "score", "solve_time_mean")


@dataclass
class PlanningMetrics:
    progress: float
    avg_abs_jerk: float
    min_ttc: float
    collided: bool
    closed_loop_score: float
    solve_time_mean: float = float("nan")


def _records(log):
    return log.records if hasattr(log, "records") else list(log)


def ego_progress(log, expert_progress):
    """Arc length covered by the ego as a fraction of the expert's, floored at 0."""
    if not expert_progress > 0:
        raise DomainError("expert_progress must be positive")
    recs = _records(log)
    if not recs:
        return 0.0
    gained = recs[-1]["ego_after"]["s"] - recs[0]["ego"]["s"]
    return max(gained / expert_progress, 0.0)


def avg_jerk(log, dt):
    """Mean magnitude of the second difference of applied velocities, over dt**2."""
    recs = _records(log)
    if len(recs) < 4:
        raise DomainError(f"jerk needs at least 4 records, got {len(recs)}")
    if not dt > 0:
        raise DomainError("dt must be positive")
    u = np.array([r["control"] for r in recs], dtype=float)
    acc = np.diff(u, axis=0) / dt
    jerk = np.linalg.norm(np.diff(acc, axis=0), axis=-1) / dt
    return float(np.mean(jerk))


def time_to_collision(ego_pos, ego_vel, agent_pos, agent_vel, rect, dt,
                      horizon=TTC_HORIZON, substeps=TTC_SUBSTEPS):
    """First substep time at which the two rectangles overlap under frozen velocities.

    Batched over agents: ``agent_pos`` and ``agent_vel`` may be ``(A, 2)`` with
    ``rect`` ``(A, 2)``.  Returns ``inf`` where no overlap occurs in the window.
    """
    h = dt / substeps
    n = int(math.floor(horizon / h + 1e-9))
    tau = h * np.arange(n + 1)
    rel = np.asarray(agent_pos, float) - np.asarray(ego_pos, float)
    w = np.asarray(agent_vel, float) - np.asarray(ego_vel, float)
    r = np.asarray(rect, float)
    traj = rel[..., None, :] + tau[:, None] * w[..., None, :]
    hit = np.all(np.abs(traj) <= r[..., None, :], axis=-1)
    first = np.where(hit.any(axis=-1), np.argmax(hit, axis=-1), -1)
    return np.where(first >= 0, tau[np.maximum(first, 0)], np.inf)


def min_ttc(log):
    """Minimum time to collision over all steps and agents (``inf`` if never)."""
    best = np.inf
    for r in _records(log):
        if not r["agents"]:
            continue
        ego = r["ego"]
        pos = np.array([a["position"] for a in r["agents"]])
        vel = np.array([a["velocity"] for a in r["agents"]])
        rect = np.array([overlap_rect(ego["half_size"], a["half_size"]).as_array() for a in r["agents"]])
        ttc = time_to_collision(ego["position"], r["control"], pos, vel, rect, r["dt"])
        best = min(best, float(np.min(ttc)))
    return best


def collided(log):
    return any(r["collisions"] or r.get("collisions_after") for r in _records(log))


def closed_loop_score(progress, min_ttc, avg_abs_jerk, collided):
    if collided:
        return 0.0
    comfort = 1.0 if avg_abs_jerk <= JERK_COMFORT else JERK_COMFORT / avg_abs_jerk
    w_p, w_t, w_c = SCORE_WEIGHTS
    return w_p * min(progress, 1.0) + w_t * min(min_ttc / TTC_TARGET, 1.0) + w_c * comfort


def evaluate(log, expert_progress):
    """All planning metrics of one rollout."""
    recs = _records(log)
    prog = ego_progress(recs, expert_progress)
    jerk = avg_jerk(recs, recs[0]["dt"])
    ttc = min_ttc(recs)
    hit = collided(recs)
    times = [r["solve_time"] for r in recs if "solve_time" in r]
    return PlanningMetrics(
        progress=prog,
        avg_abs_jerk=jerk,
        min_ttc=ttc,
        collided=hit,
        closed_loop_score=closed_loop_score(prog, ttc, jerk, hit),
        solve_time_mean=float(np.mean(times)) if times else float("nan"),
    )


def csv_row(scenario_id, alpha, m):
    return {
        "id": scenario_id,
        "alpha": alpha,
        "progress": m.progress,
        "jerk": m.avg_abs_jerk,
        "min_ttc": m.min_ttc,
        "collided": int(m.collided),
        "score": m.closed_loop_score,
        "solve_time_mean": m.solve_time_mean,
    }


def as_dict(m):
    return asdict(m)
