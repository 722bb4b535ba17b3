"""The fused training kernels against the numpy reference implementation."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2pinn import _kernels as kn
from t2pinn.net import MlpParams, n_params, sigmoid
from t2pinn.signal import EchoSeries
from t2pinn.trainer import CollocationGrid, LossWeights, fused_loss_grad, grad_total, loss_bloch, loss_data


def instance(seed, c=8, k=101):
    rng = np.random.default_rng(seed)
    t_scale = float(rng.uniform(5, 100))
    p = MlpParams.from_flat(rng.normal(0, 0.7, n_params(c)), c, t_scale)
    times = np.sort(rng.choice(np.arange(1.0, 120.0), 9, replace=False))
    series = EchoSeries(times, rng.uniform(0, 1, 9))
    grid = CollocationGrid.uniform(times[0], times[-1], k)
    return p, grid, series


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.sampled_from([(0.01, 1.0), (1.0, 0.0), (0.0, 1.0), (0.3, 2.0)]), st.booleans())
def test_fused_matches_reference(seed, weights, squared):
    p, grid, series = instance(seed)
    w = LossWeights(*weights)
    lb, ld, g = fused_loss_grad(p, grid, series, w, squared)
    assert lb == pytest.approx(loss_bloch(p, grid, squared), rel=1e-12, abs=1e-15)
    assert ld == pytest.approx(loss_data(p, series, squared), rel=1e-12, abs=1e-15)
    ref = grad_total(p, grid, series, w, squared).to_flat()
    np.testing.assert_allclose(g.to_flat(), ref, rtol=1e-10, atol=1e-13)


def test_fused_matches_reference_other_widths():
    for c in (1, 3, 12):
        p, grid, series = instance(c, c=c, k=57)
        w = LossWeights()
        _, _, g = fused_loss_grad(p, grid, series, w)
        np.testing.assert_allclose(g.to_flat(), grad_total(p, grid, series, w).to_flat(), rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("x", [-800.0, -30.0, -1e-3, 0.0, 2.5, 40.0, 800.0])
def test_scalar_helpers(x):
    assert kn.softplus(x) == pytest.approx(float(np.logaddexp(0.0, x)), rel=1e-15, abs=1e-300)
    mpmath.mp.dps = 30
    expected = float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))
    assert kn.sigmoid(x) == pytest.approx(expected, rel=1e-14, abs=1e-300)
    assert float(sigmoid(x)) == pytest.approx(expected, rel=1e-14, abs=1e-300)


def test_adam_step_matches_textbook():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=20)
    ref = theta.copy()
    m = np.zeros(20)
    v = np.zeros(20)
    mr = np.zeros(20)
    vr = np.zeros(20)
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    for step in range(1, 30):
        g = rng.normal(size=20)
        kn.adam_step(theta, g, m, v, step, lr, b1, b2, eps)
        mr = b1 * mr + (1 - b1) * g
        vr = b2 * vr + (1 - b2) * g * g
        mhat = mr / (1 - b1**step)
        vhat = vr / (1 - b2**step)
        ref = ref - lr * mhat / (np.sqrt(vhat) + eps)
    np.testing.assert_allclose(theta, ref, rtol=1e-12, atol=1e-15)
