"""Gaussian-mixture agent forecasts, the constant-velocity baseline and forecast metrics."""

from dataclasses import dataclass, field
import json
import math

import numpy as np
from scipy.special import logsumexp

from uasmpc.errors import DomainError
from uasmpc.geometry import floor_covariance, inv_sqrt

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_SIGMA2 = 0.02


@dataclass
class AgentState:
    position: np.ndarray
    velocity: np.ndarray
    heading: float = 0.0
    half_size: tuple = (2.5, 1.0)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(2)
        self.heading = float(self.heading)
        self.half_size = tuple(float(h) for h in self.half_size)
        if len(self.half_size) != 2 or min(self.half_size) <= 0:
            raise DomainError(f"half_size must be two positive extents, got {self.half_size}")
        if not -np.pi < self.heading <= np.pi:
            self.heading = float(np.arctan2(np.sin(self.heading), np.cos(self.heading)))


@dataclass
class Mode:
    prob: float
    means: np.ndarray
    covs: np.ndarray


@dataclass
class GmmPrediction:
    """Multi-modal forecast for one agent.

    ``probs`` has shape ``(n_modes,)``, ``means`` ``(n_modes, N, 2)`` and ``covs``
    ``(n_modes, N, 2, 2)``.  Step ``k`` of the arrays is the forecast ``k + 1``
    steps ahead.
    """

    probs: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    dt: float = 0.3
    agent_id: object = field(default=None, compare=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        n_modes = self.probs.shape[0]
        if self.means.ndim != 3 or self.means.shape[0] != n_modes or self.means.shape[2] != 2:
            raise DomainError(f"means must have shape ({n_modes}, N, 2), got {self.means.shape}")
        if self.covs.shape != self.means.shape + (2,):
            raise DomainError(f"covs must have shape {self.means.shape + (2,)}, got {self.covs.shape}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise DomainError(f"mode probabilities must be non-negative and sum to 1, got {self.probs}")
        if not np.allclose(self.covs, np.swapaxes(self.covs, -1, -2), atol=1e-12):
            raise DomainError("covariances must be symmetric")

    @property
    def n_modes(self):
        return self.probs.shape[0]

    @property
    def horizon(self):
        return self.means.shape[1]

    @property
    def modes(self):
        return [Mode(float(p), m, c) for p, m, c in zip(self.probs, self.means, self.covs)]

    @classmethod
    def from_modes(cls, modes, dt=0.3, agent_id=None):
        return cls(
            probs=[m.prob for m in modes],
            means=np.stack([np.asarray(m.means, float) for m in modes]),
            covs=np.stack([np.asarray(m.covs, float) for m in modes]),
            dt=dt,
            agent_id=agent_id,
        )

    def to_dict(self):
        c = self.covs
        packed = np.stack([c[..., 0, 0], c[..., 0, 1], c[..., 1, 1]], axis=-1)
        return {
            "modes": [
                {"prob": float(p), "means": m.tolist(), "covs": pk.tolist()}
                for p, m, pk in zip(self.probs, self.means, packed)
            ]
        }

    @classmethod
    def from_dict(cls, d, dt=0.3, agent_id=None):
        modes = d["modes"]
        if not modes:
            raise DomainError("prediction has no modes")
        means = [np.asarray(m["means"], dtype=float) for m in modes]
        covs = []
        for m in modes:
            pk = np.asarray(m["covs"], dtype=float)
            if pk.ndim != 2 or pk.shape[1] != 3:
                raise DomainError("packed covariances must be [a, b, c] triples")
            covs.append(np.stack([np.stack([pk[:, 0], pk[:, 1]], -1), np.stack([pk[:, 1], pk[:, 2]], -1)], -2))
        lengths = {len(m) for m in means} | {len(c) for c in covs}
        if len(lengths) != 1:
            raise DomainError("every mode must carry the same number of steps")
        return cls([m["prob"] for m in modes], np.stack(means), np.stack(covs), dt=dt, agent_id=agent_id)


def constant_velocity_predict(state, N, dt, sigma2=DEFAULT_SIGMA2):
    """Single-mode forecast extrapolating the current velocity with fixed isotropic covariance."""
    if N < 1 or dt <= 0 or sigma2 <= 0:
        raise DomainError(f"need N >= 1, dt > 0, sigma2 > 0; got N={N}, dt={dt}, sigma2={sigma2}")
    k = np.arange(1, N + 1)[:, None]
    means = state.position + k * dt * state.velocity
    covs = np.broadcast_to(sigma2 * np.eye(2), (N, 2, 2)).copy()
    return GmmPrediction([1.0], means[None], covs[None], dt=dt)


def scale_covariances(pred, alpha):
    """Return a copy of ``pred`` with every covariance multiplied by ``alpha``."""
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    return GmmPrediction(pred.probs.copy(), pred.means.copy(), pred.covs * alpha, dt=pred.dt, agent_id=pred.agent_id)


def _log_gauss(x, means, covs):
    """Log density of 2D Gaussians, broadcasting ``x`` against leading axes."""
    covs = floor_covariance(covs)
    diff = x - means
    a, b, c, d = covs[..., 0, 0], covs[..., 0, 1], covs[..., 1, 0], covs[..., 1, 1]
    det = a * d - b * c
    dx, dy = diff[..., 0], diff[..., 1]
    maha = (d * dx * dx - (b + c) * dx * dy + a * dy * dy) / det
    return -LOG_2PI - 0.5 * np.log(det) - 0.5 * maha


def gmm_nll(pred, truth):
    """Average over steps of the negative log mixture density of the ground truth."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape != (pred.horizon, 2):
        raise DomainError(f"truth must have shape ({pred.horizon}, 2), got {truth.shape}")
    logp = _log_gauss(truth[None], pred.means, pred.covs)  # (modes, N)
    with np.errstate(divide="ignore"):
        logw = np.log(pred.probs)[:, None]
    return float(-np.mean(logsumexp(logp + logw, axis=0)))


def gaussian_entropy(cov):
    """Differential entropy of 2D Gaussians with covariance ``cov`` (batched)."""
    _, logdet = np.linalg.slogdet(floor_covariance(cov))
    return 1.0 + LOG_2PI + 0.5 * logdet


def avg_entropy(pred):
    """Entropy of every mixture component, averaged over modes and steps."""
    return float(np.mean(gaussian_entropy(pred.covs)))


def sample_trajectories(pred, n, seed=None):
    """Draw ``n`` trajectories of shape ``(n, N, 2)``: a mode, then each step independently."""
    if n < 1:
        raise DomainError("need at least one sample")
    rng = np.random.default_rng(seed)
    modes = rng.choice(pred.n_modes, size=n, p=pred.probs)
    L = np.linalg.cholesky(floor_covariance(pred.covs))
    eps = rng.standard_normal((n, pred.horizon, 2))
    return pred.means[modes] + np.einsum("snij,snj->sni", L[modes], eps)


def mode_mean_trajectories(pred, k=5):
    """The ``k`` most probable mode means, the deterministic alternative to sampling."""
    order = np.argsort(-pred.probs, kind="stable")[:k]
    return pred.means[order]


def min_ade_fde(samples, truth):
    """Best-of-samples average and final displacement errors."""
    samples = np.asarray(samples, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.shape[0] < 1 or samples.shape[1:] != truth.shape:
        raise DomainError(f"samples {samples.shape} do not match truth {truth.shape}")
    err = np.sqrt(np.sum((samples - truth[None]) ** 2, axis=-1))
    # correctly rounded sums keep the result independent of summation order
    ade = min(math.fsum(row) / row.size for row in err)
    return float(ade), float(err[:, -1].min())


def _coverage_single(truth, means, covs):
    M = inv_sqrt(covs)
    z = np.einsum("...ij,...j->...i", M, truth - means)
    return -np.expm1(-0.5 * np.sum(z * z, axis=-1))


def _lse(x):
    m = np.max(x, axis=-1)
    return m + np.log(np.sum(np.exp(x - m[..., None]), axis=-1))


def coverage_scores(records, n_mc=2048, seed=0):
    """Probability mass of the highest-density region whose boundary passes through the truth.

    ``records`` is a sequence of ``(truth, probs, means, covs)`` with per-step
    mixtures: ``probs (J,)``, ``means (J, 2)``, ``covs (J, 2, 2)``.  For a single
    Gaussian this is the chi-square(2) CDF of the squared Mahalanobis distance.
    Mixtures use a fixed bank of standard normal draws so the result is
    deterministic.
    """
    base = np.random.default_rng(seed).standard_normal((n_mc, 2))
    out = np.empty(len(records))
    groups = {}
    for r, (truth, probs, means, covs) in enumerate(records):
        probs = np.asarray(probs, dtype=float)
        means = np.asarray(means, dtype=float).reshape(-1, 2)
        covs = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
        truth = np.asarray(truth, dtype=float)
        keep = probs > 0
        probs, means, covs = probs[keep], means[keep], covs[keep]
        if probs.shape[0] == 1:
            out[r] = _coverage_single(truth, means[0], covs[0])
        else:
            groups.setdefault(probs.shape[0], []).append((r, truth, probs, means, covs))
    # mixtures with the same number of modes are scored in batches
    for J, items in groups.items():
        chunk = max(1, 2**22 // (J * J * n_mc))
        for start in range(0, len(items), chunk):
            part = items[start:start + chunk]
            idx = [it[0] for it in part]
            truth = np.stack([it[1] for it in part])
            probs = np.stack([it[2] for it in part])
            means = np.stack([it[3] for it in part])
            covs = floor_covariance(np.stack([it[4] for it in part]))
            logw = np.log(probs)
            level = _lse(_log_gauss(truth[:, None], means, covs) + logw)
            # draws from each component, scored under the full mixture
            L = np.linalg.cholesky(covs)
            draws = np.stack([L[..., 0, 0, None] * base[:, 0],
                              L[..., 1, 0, None] * base[:, 0] + L[..., 1, 1, None] * base[:, 1]], axis=-1)
            draws += means[:, :, None, :]
            logp = _log_gauss(draws[:, :, :, None, :], means[:, None, None], covs[:, None, None])
            dens = _lse(logp + logw[:, None, None, :])
            frac = np.mean(dens >= level[:, None, None], axis=2)
            out[idx] = np.sum(probs * frac, axis=1)
    return out


def ece(records, n_levels=100, **kwargs):
    """Calibration error between empirical coverage and the ideal diagonal.

    Each record contributes one coverage score in [0, 1]; calibrated forecasts
    make the scores uniform.  The error is the mean orthogonal distance
    ``|F_emp(q) - q| / sqrt(2)`` over ``n_levels`` evenly spaced levels ``q``.
    """
    if len(records) == 0:
        raise DomainError("ece needs at least one record")
    c = np.sort(coverage_scores(records, **kwargs))
    levels = np.linspace(0.0, 1.0, n_levels)
    emp = np.searchsorted(c, levels, side="right") / c.size
    return float(np.mean(np.abs(emp - levels)) / np.sqrt(2.0))


def step_records(pred, truth):
    """Split a forecast and its ground truth into per-step calibration records."""
    truth = np.asarray(truth, dtype=float)
    return [(truth[k], pred.probs, pred.means[:, k], pred.covs[:, k]) for k in range(pred.horizon)]


def load_prediction_dump(path):
    """Read a prediction dump: a JSON array of ``{agent_id, t, modes, truth}`` records."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise DomainError("prediction dump must be a JSON array")
    out = []
    for i, rec in enumerate(raw):
        for key in ("agent_id", "t", "modes", "truth"):
            if key not in rec:
                raise DomainError(f"record {i}: missing field '{key}'")
        pred = GmmPrediction.from_dict(rec, dt=float(rec.get("dt", 0.3)), agent_id=rec["agent_id"])
        truth = np.asarray(rec["truth"], dtype=float)
        if truth.shape != (pred.horizon, 2):
            raise DomainError(f"record {i}: field 'truth' must have {pred.horizon} [x, y] points")
        out.append((rec["agent_id"], rec["t"], pred, truth))
    return out


def dump_record(agent_id, t, pred, truth):
    rec = {"agent_id": agent_id, "t": t}
    rec.update(pred.to_dict())
    rec["truth"] = np.asarray(truth, dtype=float).tolist()
    return rec
