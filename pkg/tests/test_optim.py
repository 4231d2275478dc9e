import numpy as np
import pytest

from contrastive_audio.exceptions import NonFiniteGradient
from contrastive_audio.optim import Adam


def reference_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop over the textbook update."""
    theta = [float(t) for t in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    out = []
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mhat / (vhat ** 0.5 + eps)
        out.append(list(theta))
    return out


def test_matches_reference_over_ten_steps():
    rng = np.random.default_rng(0)
    theta0 = rng.standard_normal(6)
    grads = rng.standard_normal((10, 6))
    want = reference_adam(theta0, grads, lr=0.01)
    params = {"w": theta0.copy()}
    opt = Adam(lr=0.01)
    for t in range(10):
        opt.step(params, {"w": grads[t].copy()})
        np.testing.assert_allclose(params["w"], want[t], rtol=1e-12, atol=1e-15)


def test_first_step_moves_by_lr_against_gradient():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([3.0, -0.01, 100.0])
    Adam(lr=1e-3).step(params, {"w": g})
    np.testing.assert_allclose(params["w"], [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], rtol=1e-6)


def test_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, 2.0])}
    Adam().step(params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], [1.0, 2.0])


def test_quadratic_converges():
    params = {"w": np.array([3.0, -5.0, 1.0])}
    opt = Adam(lr=0.1)
    for _ in range(500):
        opt.step(params, {"w": params["w"].copy()})  # grad of 0.5 * w^2
    assert np.max(np.abs(params["w"])) < 0.05


def test_nonfinite_gradient_rejected_without_side_effects():
    params = {"a": np.ones(2), "b": np.ones(2)}
    opt = Adam()
    with pytest.raises(NonFiniteGradient):
        opt.step(params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])})
    assert np.array_equal(params["a"], np.ones(2)) and opt.t == 0 and not opt.m


def test_float32_params_stay_float32():
    params = {"w": np.ones(3, dtype=np.float32)}
    Adam().step(params, {"w": np.ones(3, dtype=np.float32)})
    assert params["w"].dtype == np.float32
