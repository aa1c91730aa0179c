import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fora.exceptions import NumericalError, RankDeficientError
from fora.manifold import (
    SkewFactor,
    StiefelPoint,
    build_skew,
    cayley_direct,
    cayley_fixed_point,
    flop_count,
    qr_retract,
    riemannian_grad,
    stiefel_drift,
)

from conftest import stiefel
from oracles import dense_cayley, jacobi_eigvals_symmetric


def random_skew(rng, d):
    m = rng.standard_normal((d, d))
    return m - m.T


def w_hat_dense(b, g):
    return g @ b.T - 0.5 * b @ b.T @ g @ b.T


def tangency(b, xi):
    return np.max(np.abs(b.T @ xi + xi.T @ b))


# riemannian_grad

def test_projection_idempotent_on_tangent(rng):
    b = stiefel(rng, 10, 3)
    c = rng.standard_normal((10, 3))
    tangent = c - b @ (0.5 * (b.T @ c + c.T @ b))
    assert np.max(np.abs(riemannian_grad(b, tangent) - tangent)) <= 1e-12


def test_normal_direction_projects_to_zero(rng):
    b = stiefel(rng, 10, 3)
    assert np.max(np.abs(riemannian_grad(b, b))) <= 1e-12


def test_tangency_and_skew_form_100_instances():
    rng = np.random.default_rng(11)
    for _ in range(100):
        d = int(rng.integers(4, 65))
        r = int(rng.integers(1, min(d, 16) + 1))
        b = stiefel(rng, d, r)
        g = rng.standard_normal((d, r))
        xi = riemannian_grad(b, g)
        assert tangency(b, xi) <= 1e-12
        w = w_hat_dense(b, g)
        assert np.max(np.abs((w - w.T) @ b - xi)) <= 1e-10


def test_riemannian_grad_accepts_point(rng):
    b = stiefel(rng, 6, 2)
    g = rng.standard_normal((6, 2))
    np.testing.assert_array_equal(riemannian_grad(StiefelPoint.audit(b), g), riemannian_grad(b, g))


# build_skew

def test_zero_gradient_gives_zero_skew(rng):
    b = stiefel(rng, 7, 2)
    skew = build_skew(b, np.zeros((7, 2)))
    x = rng.standard_normal((7, 3))
    assert not skew.apply(x).any()
    assert not skew.dense().any()


def test_factored_apply_vs_dense_oracle(rng):
    b = stiefel(rng, 6, 2)
    g = rng.standard_normal((6, 2))
    w_hat = w_hat_dense(b, g)
    w = w_hat - w_hat.T
    skew = build_skew(b, g)
    x = rng.standard_normal((6, 4))
    assert np.max(np.abs(skew.apply(x) - w @ x)) <= 1e-12
    assert np.max(np.abs(skew.dense() - w)) <= 1e-12


@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_skew_factor_is_exactly_skew(d, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, d)
    skew = build_skew(stiefel(rng, d, r), rng.standard_normal((d, r)))
    w = skew.dense()
    assert np.array_equal(w, -w.T)


def test_spectral_norm_vs_jacobi(rng):
    skew = build_skew(stiefel(rng, 20, 3), rng.standard_normal((20, 3)))
    w = skew.dense()
    lam = jacobi_eigvals_symmetric(w.T @ w)
    assert skew.spectral_norm() == pytest.approx(math.sqrt(lam[0]), rel=1e-10)


def test_apply_operation_count_is_linear_in_d(rng):
    r = 4
    for d in (64, 256, 1024):
        skew = build_skew(stiefel(rng, d, r), rng.standard_normal((d, r)))
        before = flop_count()
        skew.apply(rng.standard_normal((d, r)))
        assert flop_count() - before <= 4 * d * r * r


def test_factored_path_never_allocates_d_by_d(rng):
    d, r = 1500, 4
    b = stiefel(rng, d, r)
    g = rng.standard_normal((d, r))
    dxd_bytes = d * d * 8
    tracemalloc.start()
    try:
        skew = build_skew(b, g)
        skew.spectral_norm()
        y = cayley_fixed_point(skew, b, 0.1 / skew.spectral_norm(), 5)
        riemannian_grad(b, g)
        qr_retract(y)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert peak < dxd_bytes / 10


# cayley_direct

def test_cayley_zero_w_identity(rng):
    b = stiefel(rng, 8, 3)
    np.testing.assert_array_equal(cayley_direct(np.zeros((8, 8)), b, 0.3), b)


def test_cayley_2x2_rotation_closed_form():
    w, alpha = 1.7, 0.4
    theta = 2 * math.atan(alpha * w / 2)
    rot = np.array([[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]])
    out = cayley_direct(np.array([[0.0, w], [-w, 0.0]]), np.eye(2), alpha)
    assert np.max(np.abs(out - rot)) <= 1e-15


def test_cayley_direct_vs_elimination_oracle(rng):
    w = random_skew(rng, 12)
    b = stiefel(rng, 12, 3)
    assert np.max(np.abs(cayley_direct(w, b, 0.2) - dense_cayley(w, b, 0.2))) <= 1e-12


def test_cayley_orthogonality_random(rng):
    for alpha in (1e-3, 1e-2, 1e-1):
        for _ in range(20):
            d = int(rng.integers(2, 65))
            q = cayley_direct(random_skew(rng, d), np.eye(d), alpha)
            assert np.linalg.norm(q.T @ q - np.eye(d)) <= 1e-12


def test_cayley_rejects_non_skew(rng):
    with pytest.raises(ValueError, match="skew"):
        cayley_direct(rng.standard_normal((4, 4)), np.eye(4)[:, :2], 0.1)


# cayley_fixed_point

def test_fixed_point_zero_skew(rng):
    b = stiefel(rng, 9, 3)
    skew = SkewFactor(np.zeros((9, 3)), b)
    for n_c in (1, 5):
        np.testing.assert_array_equal(cayley_fixed_point(skew, b, 0.5, n_c), b)


def test_fixed_point_small_step_matches_direct(rng):
    b = stiefel(rng, 16, 4)
    skew = build_skew(b, rng.standard_normal((16, 4)))
    y = cayley_fixed_point(skew, b, 0.01, 5)
    assert np.linalg.norm(y - cayley_direct(skew.dense(), b, 0.01)) <= 1e-8


def test_fixed_point_contraction_ratio(rng):
    b = stiefel(rng, 16, 4)
    skew = build_skew(b, rng.standard_normal((16, 4)))
    alpha = 0.2 / skew.spectral_norm()
    exact = cayley_direct(skew.dense(), b, alpha)
    errs = [np.linalg.norm(cayley_fixed_point(skew, b, alpha, k) - exact) for k in range(1, 6)]
    ratios = [e1 / e0 for e0, e1 in zip(errs, errs[1:])]
    bound = alpha * skew.spectral_norm() / 2
    assert all(0 < q <= bound * 1.05 for q in ratios)
    assert max(ratios) >= 0.3 * bound


def test_fixed_point_divergence_detected(rng):
    b = stiefel(rng, 16, 4)
    skew = build_skew(b, rng.standard_normal((16, 4)))
    with pytest.raises(NumericalError, match="smaller step"):
        cayley_fixed_point(skew, b, 8.0 / skew.spectral_norm(), 10)


def test_fixed_point_needs_an_iteration(rng):
    b = stiefel(rng, 5, 2)
    with pytest.raises(ValueError):
        cayley_fixed_point(build_skew(b, b), b, 0.1, 0)


# retraction and drift

def test_retract_orthonormal_fixed_point(rng):
    b = stiefel(rng, 12, 4)
    p = qr_retract(b)
    assert np.max(np.abs(p.b - b)) <= 1e-12
    assert p.drift <= 1e-12


def test_retract_small_perturbation(rng):
    b = stiefel(rng, 12, 4)
    noisy = b + 1e-4 * rng.standard_normal((12, 4))
    p = qr_retract(noisy)
    assert p.drift <= 1e-12
    dist = np.linalg.norm(p.b - noisy)
    assert 1e-6 < dist < 1e-3


def test_retract_zero_column():
    b = np.eye(5)[:, :3]
    b[:, 1] = 0
    with pytest.raises(RankDeficientError):
        qr_retract(b)


def test_drift_definition(rng):
    b = stiefel(rng, 8, 3) * 1.001
    assert stiefel_drift(b) == pytest.approx(np.linalg.norm(b.T @ b - np.eye(3)), rel=1e-12)
    assert StiefelPoint.audit(b).drift == stiefel_drift(b)
