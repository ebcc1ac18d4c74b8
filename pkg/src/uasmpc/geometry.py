"""Keep-out geometry for Gaussian agents with rectangular footprints.

The ego centre ``x`` collides with an agent centred at ``o`` when ``x - o`` lies in
the overlap rectangle ``R = {|r_1| <= r_long, |r_2| <= r_lat}``.  With
``o ~ N(mu, Sigma)`` and coverage level ``p``, the ego must stay outside
``E (+) R`` where ``E`` is the ``p``-mass Mahalanobis ellipse.  Whitening with
``Sigma^{-1/2}`` turns ``E`` into a disk of radius ``sqrt(beta)`` and ``R`` into a
parallelogram, so the test reduces to a point-to-parallelogram distance.

All functions accept batched inputs along leading axes where noted.
"""

from dataclasses import dataclass

import numpy as np

from uasmpc.errors import DomainError, NumericError

EIG_FLOOR = 1e-9
_DEGENERATE_TOL = 1e-12

# Sign patterns for the four edges (fixed s1 or s2) and four corners.
_EDGE_SIGNS = np.array([1.0, -1.0])
_CORNERS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])


@dataclass(frozen=True)
class OverlapRect:
    """Centre-to-centre overlap rectangle with half extents in metres."""

    r_long: float
    r_lat: float

    def __post_init__(self):
        if not (self.r_long > 0 and self.r_lat > 0):
            raise DomainError(f"overlap half extents must be positive, got {self}")

    def as_array(self):
        return np.array([self.r_long, self.r_lat])


def chi2_quantile_2dof(p):
    """Quantile of the chi-square distribution with two degrees of freedom.

    For two dof the CDF is ``1 - exp(-x/2)``, so the quantile is closed form.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"coverage level must lie in (0, 1), got {p}")
    return -2.0 * np.log1p(-p)


def inv_sqrt(cov, floor=EIG_FLOOR):
    """Symmetric inverse square root of one or more 2x2 covariances.

    Eigenvalues below ``floor`` are raised to ``floor`` first.  Accepts shape
    ``(..., 2, 2)``.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.shape[-2:] != (2, 2):
        raise DomainError(f"expected (..., 2, 2) covariance, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise NumericError("covariance contains non-finite entries")
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, U = np.linalg.eigh(sym)
    scale = np.maximum(np.abs(w).max(axis=-1, keepdims=True), 1.0)
    if np.any(w < -1e-9 * scale):
        raise NumericError("covariance is indefinite beyond the eigenvalue floor")
    w = np.maximum(w, floor)
    return (U * (1.0 / np.sqrt(w))[..., None, :]) @ np.swapaxes(U, -1, -2)


def floor_covariance(cov, floor=EIG_FLOOR):
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, U = np.linalg.eigh(sym)
    w = np.maximum(w, floor)
    return (U * w[..., None, :]) @ np.swapaxes(U, -1, -2)


def overlap_rect(ev_half, nev_half):
    """Minkowski sum of two half-size rectangles, given as (long, lat) pairs."""
    ev_half = np.asarray(ev_half, dtype=float)
    nev_half = np.asarray(nev_half, dtype=float)
    if np.any(ev_half <= 0) or np.any(nev_half <= 0):
        raise DomainError("half extents must be positive")
    total = ev_half + nev_half
    return OverlapRect(float(total[0]), float(total[1]))


def zonotope_generators(cov, rect):
    """Generator matrix ``V = Sigma^{-1/2} diag(r_long, r_lat)``; columns are v1, v2."""
    r = rect.as_array() if isinstance(rect, OverlapRect) else np.asarray(rect, float)
    M = inv_sqrt(cov)
    return M * r[..., None, :]


def zonotope_candidates(z, V):
    """The nine candidate nearest points of ``{V s : |s|_inf <= 1}`` to ``z``.

    Returns ``(points, valid)`` with shapes ``(..., 9, 2)`` and ``(..., 9)``.
    Slot 0 is the interior candidate (``z`` itself, valid only when ``z`` is
    inside); slots 1-4 are clamped projections onto the edges ``s1 = +-1`` and
    ``s2 = +-1``; slots 5-8 are the corners.
    """
    z = np.asarray(z, dtype=float)
    V = np.asarray(V, dtype=float)
    v1 = V[..., :, 0]
    v2 = V[..., :, 1]
    det = v1[..., 0] * v2[..., 1] - v1[..., 1] * v2[..., 0]
    size = np.linalg.norm(v1, axis=-1) * np.linalg.norm(v2, axis=-1)
    if np.any(np.abs(det) <= _DEGENERATE_TOL * size) or np.any(size == 0):
        raise NumericError("zonotope generators are (nearly) linearly dependent")

    # interior test by inverting the 2x2 generator matrix
    s1 = (v2[..., 1] * z[..., 0] - v2[..., 0] * z[..., 1]) / det
    s2 = (-v1[..., 1] * z[..., 0] + v1[..., 0] * z[..., 1]) / det
    inside = (np.abs(s1) <= 1.0) & (np.abs(s2) <= 1.0)

    shape = np.broadcast_shapes(z.shape[:-1], V.shape[:-2])
    pts = np.empty(shape + (9, 2))
    pts[..., 0, :] = z

    v1b = v1[..., None, :]
    v2b = v2[..., None, :]
    zb = z[..., None, :]
    sg = _EDGE_SIGNS[:, None]
    # edges s1 = +-1, free parameter along v2
    base = sg * v1b
    t = np.sum((zb - base) * v2b, axis=-1) / np.sum(v2b * v2b, axis=-1)
    pts[..., 1:3, :] = base + np.clip(t, -1.0, 1.0)[..., None] * v2b
    # edges s2 = +-1, free parameter along v1
    base = sg * v2b
    t = np.sum((zb - base) * v1b, axis=-1) / np.sum(v1b * v1b, axis=-1)
    pts[..., 3:5, :] = base + np.clip(t, -1.0, 1.0)[..., None] * v1b
    pts[..., 5:9, :] = _CORNERS[:, 0:1] * v1b + _CORNERS[:, 1:2] * v2b

    valid = np.ones(shape + (9,), dtype=bool)
    valid[..., 0] = inside
    return pts, valid


def dist_to_zonotope(z, V):
    """Euclidean distance from ``z`` to the parallelogram spanned by ``V``.

    Returns ``(distance, nearest)``.  Works on a single point or a batch.
    """
    z = np.asarray(z, dtype=float)
    pts, valid = zonotope_candidates(z, V)
    d = np.linalg.norm(pts - z[..., None, :], axis=-1)
    d = np.where(valid, d, np.inf)
    idx = np.argmin(d, axis=-1)
    dist = np.take_along_axis(d, idx[..., None], axis=-1)[..., 0]
    nearest = np.take_along_axis(pts, idx[..., None, None], axis=-2)[..., 0, :]
    if dist.ndim == 0:
        return float(dist), nearest
    return dist, nearest


def constraint_value(x, mu, cov, rect, beta):
    """Collision margin ``dist(Sigma^{-1/2}(x - mu), Sigma^{-1/2} R) - sqrt(beta)``.

    Non-negative exactly when ``x`` lies outside the keep-out region.  Batched
    over leading axes of ``x``, ``mu`` and ``cov``.
    """
    if beta <= 0:
        raise DomainError("beta must be positive")
    M = inv_sqrt(cov)
    diff = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    z = np.einsum("...ij,...j->...i", M, diff)
    r = rect.as_array() if isinstance(rect, OverlapRect) else np.asarray(rect, float)
    V = M * r[..., None, :]
    dist, _ = dist_to_zonotope(z, V)
    return dist - np.sqrt(beta)


def rects_overlap(delta, rect):
    """Axis-aligned overlap test on centre offsets ``delta`` of shape ``(..., 2)``."""
    delta = np.asarray(delta, dtype=float)
    r = rect.as_array() if isinstance(rect, OverlapRect) else np.asarray(rect, float)
    return np.all(np.abs(delta) <= r, axis=-1)
