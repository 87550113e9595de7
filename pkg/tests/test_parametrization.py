import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainforge.parametrization import (
    BasisSet,
    TransformParams,
    build_matrix,
    eval_basis,
    eval_basis_gradient,
    fit_coefficients_ls,
    matrix_partials,
    project_coefficients,
    radial_mask,
    reconstruct,
)
from rainforge.rain_kernel import discretize_kernel, discretize_kernel_partials


def masked(basis):
    return radial_mask(np.linalg.norm(basis.grid, axis=-1), basis.p) > 0


def phi_oracle(p, n, x):
    """Basis function written out from its definition, scalar math only."""
    half = p // 2
    k, l = divmod(n % (p * p), p)
    f1, f2 = 2 * math.pi / p * (k - half), 2 * math.pi / p * (l - half)
    r = math.hypot(*x)
    r0, r1 = (p - 1) / 2, (p + 1) / 2
    lam = 1.0 if r <= r0 else 0.0 if r >= r1 else 0.5 * (1 + math.cos(math.pi * (r - r0) / (r1 - r0)))
    arg = f1 * x[0] + f2 * x[1]
    return lam * (math.sin(arg) if n >= p * p else math.cos(arg))


# -- basis set -------------------------------------------------------------------


@pytest.mark.parametrize("p", [1, 3, 5, 11])
def test_basis_size_and_unique_index(p):
    b = BasisSet(p)
    assert b.N == 2 * p * p
    assert len(b.frequency_index) == b.N
    assert len(set(b.frequency_index)) == b.N


@pytest.mark.parametrize("p", [0, 2, 4, -3])
def test_basis_rejects_even_or_nonpositive(p):
    with pytest.raises(ValueError):
        BasisSet(p)


def test_grid_convention():
    b = BasisSet(3)
    # row 0 is the top of the tile: x2 = +1
    assert tuple(b.grid[0, 0]) == (-1.0, 1.0)
    assert tuple(b.grid[0, 2]) == (1.0, 1.0)
    assert tuple(b.grid[2, 0]) == (-1.0, -1.0)
    assert np.max(np.linalg.norm(BasisSet(11).grid, axis=-1)) == pytest.approx(math.sqrt(2) * 5)


def test_index_out_of_range():
    b = BasisSet(3)
    with pytest.raises(IndexError):
        eval_basis(b, b.N, (0.0, 0.0))
    with pytest.raises(IndexError):
        eval_basis_gradient(b, -1, (0.0, 0.0))


# -- radial mask -------------------------------------------------------------------


def test_mask_examples():
    assert radial_mask(0.0, 3) == 1.0
    assert radial_mask(2.0, 3) == 0.0
    assert radial_mask(1.5, 3) == pytest.approx(0.5, abs=1e-15)
    assert radial_mask(6.0, 11) == 0.0


@given(p=st.sampled_from([3, 5, 7, 11]), a=st.floats(0, 20), b=st.floats(0, 20))
def test_mask_monotone_and_bounded(p, a, b):
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= radial_mask(hi, p) <= radial_mask(lo, p) <= 1.0


def test_mask_continuous_at_band_edges():
    for p in (3, 11):
        r0, r1 = (p - 1) / 2, (p + 1) / 2
        assert radial_mask(r0 + 1e-9, p) == pytest.approx(1.0, abs=1e-12)
        assert radial_mask(r1 - 1e-9, p) == pytest.approx(0.0, abs=1e-12)


# -- basis functions -----------------------------------------------------------------


def test_basis_at_origin():
    b = BasisSet(5)
    for n in range(b.N):
        expected = 0.0 if b.is_sine(n) else 1.0
        assert eval_basis(b, n, (0.0, 0.0)) == expected


def test_basis_outside_support():
    b = BasisSet(5)
    for n in range(0, b.N, 7):
        assert eval_basis(b, n, (5.0, 0.0)) == 0.0
        assert eval_basis(b, n, (3.0, 4.0)) == 0.0


@settings(max_examples=60)
@given(p=st.sampled_from([3, 5, 11]), n=st.integers(0, 10**6), x1=st.floats(-7, 7), x2=st.floats(-7, 7))
def test_basis_matches_scalar_oracle(p, n, x1, x2):
    b = BasisSet(p)
    n %= b.N
    assert eval_basis(b, n, (x1, x2)) == pytest.approx(phi_oracle(p, n, (x1, x2)), abs=1e-12)


def test_gradient_at_origin_is_frequency_for_sine():
    b = BasisSet(5)
    for n in range(b.p**2, b.N):
        np.testing.assert_allclose(eval_basis_gradient(b, n, (0.0, 0.0)), b.frequency(n), atol=1e-15)


def test_gradient_vanishes_far_outside():
    b = BasisSet(3)
    r = b.mask_outer_radius + 1
    for n in range(b.N):
        np.testing.assert_array_equal(eval_basis_gradient(b, n, (r, 0.3)), [0.0, 0.0])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = BasisSet(11)
    h = 1e-5
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(b.N))
        x = rng.uniform(-6, 6, 2)
        g = eval_basis_gradient(b, n, x)
        fd = np.array([
            (eval_basis(b, n, x + h * e) - eval_basis(b, n, x - h * e)) / (2 * h) for e in np.eye(2)
        ])
        scale = max(np.abs(g).max(), np.abs(fd).max())
        if scale > 1e-8:
            worst = max(worst, np.abs(g - fd).max() / scale)
    assert worst <= 1e-6


# -- transform matrices ------------------------------------------------------------------


def test_matrix_examples():
    np.testing.assert_array_equal(build_matrix(TransformParams(0.0, 1.0, 1.0)), np.eye(2))
    np.testing.assert_allclose(
        build_matrix(TransformParams(math.pi / 6, 1.0, 1.0)), [[0.8660254, -0.5], [0.5, 0.8660254]], atol=1e-7
    )
    np.testing.assert_allclose(
        build_matrix(TransformParams(math.pi / 2, 2.0, 0.5)), [[0.0, -0.5], [2.0, 0.0]], atol=1e-15
    )


@pytest.mark.parametrize("s_l,s_w", [(0.0, 1.0), (1.0, -1.0), (-2.0, 0.5)])
def test_nonpositive_scales_rejected(s_l, s_w):
    with pytest.raises(ValueError):
        TransformParams(0.1, s_l, s_w)


def test_rotation_orthogonal():
    rng = np.random.default_rng(1)
    for theta in rng.uniform(-10, 10, 1000):
        R = build_matrix(TransformParams(theta))
        np.testing.assert_allclose(R.T @ R, np.eye(2), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_matrix_partials_match_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(20):
        th, sl, sw = rng.uniform(-3, 3), rng.uniform(0.3, 2), rng.uniform(0.3, 2)
        parts = matrix_partials(TransformParams(th, sl, sw))
        for name, d in (("theta", (h, 0, 0)), ("s_l", (0, h, 0)), ("s_w", (0, 0, h))):
            plus = build_matrix(TransformParams(th + d[0], sl + d[1], sw + d[2]))
            minus = build_matrix(TransformParams(th - d[0], sl - d[1], sw - d[2]))
            np.testing.assert_allclose(parts[name], (plus - minus) / (2 * h), atol=1e-8)


# -- fitting and projection -----------------------------------------------------------------


def test_zero_filter_gives_zero_coefficients():
    b = BasisSet(11)
    np.testing.assert_array_equal(fit_coefficients_ls(b, np.zeros((11, 11))), np.zeros(b.N))
    np.testing.assert_array_equal(project_coefficients(b, np.zeros((11, 11))), np.zeros(b.N))


def test_fit_reproduces_delta_filter():
    b = BasisSet(11)
    delta = np.zeros((11, 11))
    delta[5, 5] = 1.0
    rec = reconstruct(b, fit_coefficients_ls(b, delta))
    np.testing.assert_allclose(rec[masked(b)], delta[masked(b)], atol=1e-8)


def test_unmasked_corner_is_unrepresentable():
    b = BasisSet(11)
    corner = np.zeros((11, 11))
    corner[0, 0] = 1.0
    assert not masked(b)[0, 0]
    w = fit_coefficients_ls(b, corner)
    assert reconstruct(b, w)[0, 0] == 0.0
    np.testing.assert_allclose(w, 0.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(p=st.sampled_from([3, 5, 7, 11]), seed=st.integers(0, 2**31))
def test_fit_reconstruct_property(p, seed):
    b = BasisSet(p)
    f = np.random.default_rng(seed).standard_normal((p, p))
    rec = reconstruct(b, fit_coefficients_ls(b, f))
    np.testing.assert_allclose(rec[masked(b)], f[masked(b)], atol=1e-8)


def test_fit_is_idempotent():
    b = BasisSet(7)
    w = np.random.default_rng(3).standard_normal(b.N)
    first = reconstruct(b, w)
    again = reconstruct(b, fit_coefficients_ls(b, first))
    np.testing.assert_allclose(again[masked(b)], first[masked(b)], atol=1e-10)


def test_fit_dimension_mismatch():
    with pytest.raises(ValueError):
        fit_coefficients_ls(BasisSet(3), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        project_coefficients(BasisSet(3), np.zeros((3, 4)))


def test_projection_of_vertical_difference():
    b = BasisSet(3)
    D = np.array([[0.0, -0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]])
    rec = reconstruct(b, project_coefficients(b, D))
    unit = radial_mask(np.linalg.norm(b.grid, axis=-1), 3) == 1.0
    assert unit.sum() == 5
    np.testing.assert_allclose(rec[unit], D[unit], atol=1e-6)


def test_projection_self_consistency_at_origin():
    b = BasisSet(5)
    w = project_coefficients(b, np.ones((5, 5)))
    origin = reconstruct(b, w)[2, 2]
    # every basis function is 1 (cosine) or 0 (sine) at the origin
    assert origin == pytest.approx(w[: b.p**2].sum(), abs=1e-12)
    assert origin >= 0


# -- transformed discretization ------------------------------------------------------------------


@pytest.mark.parametrize("p", [3, 11])
def test_quarter_turn_is_exact_permutation(p):
    rng = np.random.default_rng(p)
    b = BasisSet(p)
    for _ in range(20):
        w = rng.standard_normal(b.N)
        theta = rng.uniform(-math.pi, math.pi)
        base = discretize_kernel(w, TransformParams(theta))
        for quarter in (1, 2, 3):
            turned = discretize_kernel(w, TransformParams(theta + quarter * math.pi / 2))
            # positive theta tilts streak tops to the right: a clockwise turn on screen
            np.testing.assert_allclose(turned, np.rot90(base, -quarter), atol=1e-12, rtol=0)


def test_identity_transform_matches_reconstruct():
    b = BasisSet(11)
    w = np.random.default_rng(4).standard_normal(b.N)
    np.testing.assert_allclose(discretize_kernel(w, TransformParams()), reconstruct(b, w), atol=1e-14)


def test_discretize_partials_match_finite_differences():
    rng = np.random.default_rng(5)
    b = BasisSet(11)
    h = 1e-4
    for _ in range(10):
        w = rng.standard_normal(b.N)
        th, sl, sw = rng.uniform(-1.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)
        parts = discretize_kernel_partials(w, TransformParams(th, sl, sw))
        for name, d in (("theta", (h, 0, 0)), ("s_l", (0, h, 0)), ("s_w", (0, 0, h))):
            fd = (discretize_kernel(w, TransformParams(th + d[0], sl + d[1], sw + d[2]))
                  - discretize_kernel(w, TransformParams(th - d[0], sl - d[1], sw - d[2]))) / (2 * h)
            scale = np.abs(fd).max()
            assert np.abs(parts[name] - fd).max() <= 1e-4 * scale
