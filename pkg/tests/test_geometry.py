import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import lsq_linear

from uasmpc.errors import DomainError, NumericError
from uasmpc.geometry import (
    OverlapRect,
    chi2_quantile_2dof,
    constraint_value,
    dist_to_zonotope,
    inv_sqrt,
    overlap_rect,
    rects_overlap,
    zonotope_candidates,
    zonotope_generators,
)

BETA_90 = 4.605170185988092  # chi2(2) 0.9 quantile, from scipy.stats.chi2.ppf


def lsq_distance(z, V):
    """Independent oracle: bounded least squares over the box coefficients."""
    res = lsq_linear(V, z, bounds=(-1.0, 1.0), tol=1e-15)
    return float(np.linalg.norm(V @ res.x - z))


def cov_from(theta, l1, l2):
    c, s = np.cos(theta), np.sin(theta)
    U = np.array([[c, -s], [s, c]])
    return U @ np.diag([l1, l2]) @ U.T


covs = st.builds(cov_from, st.floats(0, np.pi), st.floats(0.05, 5.0), st.floats(0.05, 5.0))
rects = st.builds(OverlapRect, st.floats(0.3, 6.0), st.floats(0.3, 3.0))
points = st.tuples(st.floats(-15, 15), st.floats(-15, 15)).map(np.array)


def test_chi2_quantile_matches_scipy():
    assert chi2_quantile_2dof(0.9) == pytest.approx(BETA_90, rel=1e-14)
    assert chi2_quantile_2dof(0.95) == pytest.approx(5.991464547107979, rel=1e-14)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_chi2_quantile_rejects_out_of_range(p):
    with pytest.raises(DomainError):
        chi2_quantile_2dof(p)


def test_overlap_rect_is_minkowski_sum():
    r = overlap_rect((2.5, 1.0), (2.0, 0.9))
    assert (r.r_long, r.r_lat) == (4.5, 1.9)
    with pytest.raises(DomainError):
        overlap_rect((0.0, 1.0), (2.0, 1.0))


def test_inv_sqrt_identity_and_batch():
    cov = np.array([[[4.0, 0.0], [0.0, 0.25]], [[2.0, 0.6], [0.6, 0.5]]])
    M = inv_sqrt(cov)
    assert np.allclose(M[0], np.diag([0.5, 2.0]))
    assert np.allclose(M[1] @ cov[1] @ M[1], np.eye(2), atol=1e-12)


def test_inv_sqrt_floors_singular_and_rejects_bad_input():
    M = inv_sqrt(np.diag([1.0, 0.0]))
    assert np.isfinite(M).all() and M[1, 1] == pytest.approx(1e-9 ** -0.5)
    with pytest.raises(NumericError):
        inv_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(NumericError):
        inv_sqrt(np.array([[np.nan, 0.0], [0.0, 1.0]]))


# [DERIVED] values from the bounded least-squares oracle
@pytest.mark.parametrize(
    "cov, rect, x, dist",
    [
        (np.eye(2), (3.0, 1.5), (5.0, 4.0), 3.2015621187164247),
        ([[2.0, 0.6], [0.6, 0.5]], (4.5, 2.0), (1.0, -6.0), 5.772374944509411),
        ([[0.3, -0.1], [-0.1, 1.2]], (2.0, 1.0), (-4.0, 0.5), 3.651483716701107),
    ],
)
def test_distance_frozen_oracle_values(cov, rect, x, dist):
    M = inv_sqrt(np.asarray(cov))
    V = zonotope_generators(np.asarray(cov), OverlapRect(*rect))
    d, _ = dist_to_zonotope(M @ np.asarray(x), V)
    assert d == pytest.approx(dist, abs=1e-10)
    g = constraint_value(np.asarray(x), np.zeros(2), np.asarray(cov), OverlapRect(*rect), BETA_90)
    assert g == pytest.approx(dist - np.sqrt(BETA_90), abs=1e-10)


def test_distance_inside_is_zero_and_simple_cases():
    V = np.diag([3.0, 1.0])
    assert dist_to_zonotope(np.array([1.0, 0.5]), V)[0] == 0.0
    assert dist_to_zonotope(np.array([5.0, 0.0]), V)[0] == pytest.approx(2.0)
    assert dist_to_zonotope(np.array([4.0, 2.0]), V)[0] == pytest.approx(np.sqrt(2.0))


def test_degenerate_generators_raise():
    with pytest.raises(NumericError):
        dist_to_zonotope(np.zeros(2), np.array([[1.0, 2.0], [1.0, 2.0]]))


def test_candidates_shapes_batch():
    z = np.zeros((4, 3, 2))
    V = np.broadcast_to(np.eye(2), (4, 3, 2, 2))
    pts, valid = zonotope_candidates(z, V)
    assert pts.shape == (4, 3, 9, 2) and valid.shape == (4, 3, 9)
    assert valid[..., 0].all()


@settings(max_examples=200, deadline=None)
@given(covs, rects, points)
def test_distance_matches_lsq_oracle(cov, rect, x):
    M = inv_sqrt(cov)
    V = M * rect.as_array()
    z = M @ x
    d, nearest = dist_to_zonotope(z, V)
    assert d == pytest.approx(lsq_distance(z, V), abs=1e-7)
    # nearest point lies in the parallelogram and realises the distance
    s = np.linalg.solve(V, nearest)
    assert np.all(np.abs(s) <= 1 + 1e-9)
    assert np.linalg.norm(nearest - z) == pytest.approx(d, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(covs, rects, points)
def test_margin_sign_matches_keep_out_membership(cov, rect, x):
    g = constraint_value(x, np.zeros(2), cov, rect, BETA_90)
    M = inv_sqrt(cov)
    d = lsq_distance(M @ x, M * rect.as_array())
    assert (g >= 0) == (d >= np.sqrt(BETA_90)) or abs(d - np.sqrt(BETA_90)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(covs, rects, points, st.sampled_from([1 / 4, 1 / 3, 1 / 2, 1, 2, 3, 4, 5]), st.sampled_from([1 / 4, 1 / 3, 1 / 2, 1, 2, 3, 4, 5]))
def test_margin_nonincreasing_in_alpha(cov, rect, x, a1, a2):
    lo, hi = sorted((a1, a2))
    g_lo = constraint_value(x, np.zeros(2), lo * cov, rect, BETA_90)
    g_hi = constraint_value(x, np.zeros(2), hi * cov, rect, BETA_90)
    assert g_hi <= g_lo + 1e-9


@settings(max_examples=100, deadline=None)
@given(covs, rects, points, points)
def test_margin_translation_invariant(cov, rect, x, shift):
    a = constraint_value(x, np.zeros(2), cov, rect, BETA_90)
    b = constraint_value(x + shift, shift, cov, rect, BETA_90)
    assert a == pytest.approx(b, abs=1e-8)


def test_constraint_value_batched_matches_loop():
    rng = np.random.default_rng(3)
    cov = np.stack([cov_from(*rng.uniform([0, 0.1, 0.1], [3, 3, 3])) for _ in range(20)])
    x = rng.normal(scale=5, size=(20, 2))
    mu = rng.normal(size=(20, 2))
    rect = OverlapRect(4.5, 2.0)
    batch = constraint_value(x, mu, cov, rect, BETA_90)
    loop = [constraint_value(x[i], mu[i], cov[i], rect, BETA_90) for i in range(20)]
    assert np.allclose(batch, loop, atol=1e-14)


def test_rects_overlap_boundary():
    r = OverlapRect(4.5, 2.0)
    assert rects_overlap(np.zeros(2), r)
    assert rects_overlap(np.array([4.5, -2.0]), r)
    assert not rects_overlap(np.array([4.51, 0.0]), r)
