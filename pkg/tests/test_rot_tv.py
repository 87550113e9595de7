import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from rainforge.rot_tv import (
    VERTICAL_DIFFERENCE,
    DiffFilterSpec,
    embed_filter,
    orientation_scan,
    rot_tv_grads,
    rot_tv_loss,
    rotated_diff_filter,
    scan_to_csv,
)


def streak_layer(theta_deg, size=128, n=60, length=9.0, sigma=0.8, seed=0):
    """Hand-drawn rain: Gaussian line segments with axis (sin t, cos t), y up."""
    rng = np.random.default_rng(seed)
    t = math.radians(theta_deg)
    ax, ay = math.sin(t), math.cos(t)
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    layer = np.zeros((size, size))
    for r0, c0 in rng.uniform(8, size - 8, (n, 2)):
        x, y = cols - c0, r0 - rows
        along = x * ax + y * ay
        across = -x * ay + y * ax
        layer += np.exp(-0.5 * (across / sigma) ** 2) * (np.abs(along) <= length / 2)
    return np.repeat(layer[..., None], 3, axis=2)


def loss_oracle(layer, theta):
    filt = rotated_diff_filter(theta)
    return sum(np.abs(correlate(layer[..., c], filt, mode="same", method="direct")).sum() for c in range(layer.shape[2]))


def test_base_filter():
    assert VERTICAL_DIFFERENCE.sum() == 0.0
    np.testing.assert_array_equal(embed_filter(VERTICAL_DIFFERENCE, 3), VERTICAL_DIFFERENCE)
    with pytest.raises(ValueError):
        embed_filter(VERTICAL_DIFFERENCE, 4)


@pytest.mark.parametrize("p, smoothing", [(3, 0.0), (11, 0.0), (11, 1.0)])
def test_identity_angle_reconstructs_base(p, smoothing):
    spec = DiffFilterSpec(p=p, smoothing=smoothing)
    np.testing.assert_allclose(rotated_diff_filter(0.0, spec), spec.embedded, atol=1e-6)


def test_smoothed_filter_shape():
    tile = DiffFilterSpec().embedded
    assert abs(tile.sum()) < 1e-15
    np.testing.assert_allclose(tile, -tile[::-1], atol=0)
    np.testing.assert_allclose(tile, tile[:, ::-1], atol=0)
    # support stays inside the unmasked disc of radius (p - 1) / 2
    rows, cols = np.nonzero(tile)
    assert np.hypot(rows - 5, cols - 5).max() <= 5.0
    np.testing.assert_array_equal(DiffFilterSpec(smoothing=0.0).embedded, embed_filter(VERTICAL_DIFFERENCE, 11))
    with pytest.raises(ValueError):
        DiffFilterSpec(smoothing=-1.0)


def test_smoothing_removes_short_streak_bias():
    from rainforge.factors import RainFactorSample
    from rainforge.scene import RainContext

    ctx = RainContext.seeded(M=1, K=1, cascade_depth=1, seed=0)
    Z = np.random.default_rng(0).standard_normal((128, 128, 1))
    _, layer = ctx.rain_layer(Z, RainFactorSample(20.0, 0.65, 1.15, np.ones((1, 1)), 0.6))
    grid = np.arange(-89.0, 91.0)
    assert abs(orientation_scan(layer, grid)[0] - 20.0) <= 1.0
    assert abs(orientation_scan(layer, grid, DiffFilterSpec(smoothing=0.0))[0] - 20.0) > 2.0


@pytest.mark.parametrize("p", [3, 11])
def test_quarter_and_half_turns_permute(p):
    spec = DiffFilterSpec(p=p)
    for theta in (0.0, 0.37):
        base = rotated_diff_filter(theta, spec)
        np.testing.assert_allclose(rotated_diff_filter(theta + math.pi / 2, spec), np.rot90(base, -1), atol=1e-12)
        np.testing.assert_allclose(rotated_diff_filter(theta + math.pi, spec), base[::-1, ::-1], atol=1e-12)


def test_loss_matches_oracle():
    layer = np.random.default_rng(0).uniform(0, 1, (24, 20, 3))
    for theta in (0.0, 0.5, -1.2):
        assert rot_tv_loss(layer, theta) == pytest.approx(loss_oracle(layer, theta), rel=1e-12)


def test_zero_layer_and_2d_input():
    assert rot_tv_loss(np.zeros((8, 8, 3)), 0.4) == 0.0
    layer = np.random.default_rng(1).uniform(0, 1, (10, 10))
    assert rot_tv_loss(layer, 0.2) == pytest.approx(rot_tv_loss(layer[..., None], 0.2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-4, 4), st.floats(-math.pi, math.pi))
def test_homogeneous_and_subadditive(seed, c, theta):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 12, 12, 3))
    la = rot_tv_loss(a, theta)
    assert rot_tv_loss(c * a, theta) == pytest.approx(abs(c) * la, rel=1e-9, abs=1e-12)
    assert rot_tv_loss(a + b, theta) <= la + rot_tv_loss(b, theta) + 1e-9


def test_grads_match_finite_differences():
    layer = streak_layer(15.0, size=32, n=8, seed=2)
    theta = math.radians(15.0)
    loss, grad_r, grad_t = rot_tv_grads(layer, theta)
    assert loss == pytest.approx(rot_tv_loss(layer, theta))
    h = 1e-6
    fd = (rot_tv_loss(layer, theta + h) - rot_tv_loss(layer, theta - h)) / (2 * h)
    assert grad_t == pytest.approx(fd, rel=1e-5)
    # away from zero responses the loss is linear in R
    rng = np.random.default_rng(3)
    dense = rng.uniform(0, 1, (16, 16, 3))
    _, grad_r, _ = rot_tv_grads(dense, theta)
    d = rng.standard_normal(dense.shape)
    eps = 1e-7
    fd_r = (rot_tv_loss(dense + eps * d, theta) - rot_tv_loss(dense - eps * d, theta)) / (2 * eps)
    assert np.sum(grad_r * d) == pytest.approx(fd_r, rel=1e-6)


def test_true_angle_beats_offsets():
    layer = streak_layer(20.0)
    at = rot_tv_loss(layer, math.radians(20.0))
    assert at < rot_tv_loss(layer, math.radians(65.0))
    assert at < rot_tv_loss(layer, math.radians(-25.0))


@pytest.mark.parametrize("theta", [0.0, 20.0])
def test_scan_finds_streak_angle(theta):
    grid = np.arange(-45.0, 46.0)
    best, losses = orientation_scan(streak_layer(theta, seed=4), grid)
    assert abs(best - theta) <= 2.0
    assert losses.shape == grid.shape
    assert losses[np.argmin(np.abs(grid - best))] == losses.min()


def test_scan_zero_layer_tie_break():
    best, losses = orientation_scan(np.zeros((8, 8, 3)), [-7.0, 5.0, -3.0, 3.0, 9.0])
    np.testing.assert_array_equal(losses, 0.0)
    assert best == -3.0


def test_scan_rejects_empty_grid():
    with pytest.raises(ValueError):
        orientation_scan(np.zeros((4, 4, 3)), [])


def test_scan_csv():
    text = scan_to_csv([-1.0, 0.5], [2.0, 0.25])
    assert text == "theta_degrees,loss\n-1.0,2.0\n0.5,0.25\n"
