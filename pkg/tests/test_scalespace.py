import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynseg import _backend
from dynseg import scalespace as ss
from dynseg.tensor import ShapeError
from helpers import gaussian_blur_reflect, numeric_grad, rel_error

BACKENDS = _backend.available()


def _direct_kernel(sigma, radius):
    taps = np.empty((2 * radius + 1, 2 * radius + 1))
    for a, u in enumerate(range(-radius, radius + 1)):
        for b, v in enumerate(range(-radius, radius + 1)):
            taps[a, b] = math.exp(-(u * u + v * v) / (2 * sigma * sigma))
    return taps / taps.sum()


def test_kernel_matches_direct_formula():
    k = ss.gaussian_kernel(1.5, 4)
    assert k.taps.shape == (9, 9)
    np.testing.assert_allclose(k.taps, _direct_kernel(1.5, 4), rtol=0, atol=1e-12)


def test_kernel_limits():
    np.testing.assert_array_equal(ss.gaussian_kernel(1.0, 0).taps, [[1.0]])
    delta = ss.gaussian_kernel(1e-6, 2).taps
    assert delta[2, 2] == 1.0 and delta.sum() == 1.0
    with pytest.raises(ValueError):
        ss.gaussian_kernel(0.0, 2)
    with pytest.raises(ValueError):
        ss.kernel_dsigma(-1.0, 2)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(0, 15))
def test_kernel_normalized_symmetric_and_derivative_zero_sum(sigma, radius):
    taps = ss.gaussian_kernel(sigma, radius).taps
    assert abs(taps.sum() - 1.0) < 1e-9
    np.testing.assert_array_equal(taps, taps[::-1, :])
    np.testing.assert_array_equal(taps, taps[:, ::-1])
    assert abs(ss.kernel_dsigma(sigma, radius).sum()) < 1e-9


def test_kernel_dsigma_matches_finite_differences():
    h = 1e-6
    numeric = (ss.gaussian_kernel(1 + h, 3).taps - ss.gaussian_kernel(1 - h, 3).taps) / (2 * h)
    np.testing.assert_allclose(ss.kernel_dsigma(1.0, 3), numeric, rtol=0, atol=1e-7)
    np.testing.assert_array_equal(ss.kernel_dsigma(2.0, 0), [[0.0]])


@pytest.mark.parametrize("backend", BACKENDS)
def test_constant_field_preserved(backend):
    field = np.full((1, 3, 7, 6), 2.5)
    sig = np.full((1, 1, 7, 6), ss.SIGMA_MIN)
    out = ss.adaptive_smooth(field, sig, backend=_backend.load(backend))
    np.testing.assert_allclose(out, field, rtol=0, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("sigma", [0.5, 1.3, 2.2])
def test_uniform_sigma_matches_plain_gaussian_filter(backend, sigma):
    rng = np.random.default_rng(5)
    field = rng.standard_normal((2, 3, 16, 13))
    sig = np.full((2, 1, 16, 13), sigma)
    radius = ss.kernel_radius(sigma)
    out = ss.adaptive_smooth(field, sig, backend=_backend.load(backend))
    np.testing.assert_allclose(out, gaussian_blur_reflect(field, sigma, radius), rtol=0, atol=1e-10)


def test_semigroup_on_interior_pixels():
    rng = np.random.default_rng(11)
    field = rng.random((1, 1, 48, 48))
    twice = ss.adaptive_smooth(ss.adaptive_smooth(field, np.full((1, 1, 48, 48), 2.0)),
                               np.full((1, 1, 48, 48), math.sqrt(5.0)))
    once = ss.adaptive_smooth(field, np.full((1, 1, 48, 48), 3.0))
    m = 15  # farther than 3 * (2 + sqrt 5) from the border
    assert np.abs(twice - once)[..., m:-m, m:-m].max() < 1e-3


def test_blur_reduces_local_total_variation():
    rng = np.random.default_rng(2)
    field = rng.random((1, 1, 40, 40))
    tv = []
    for sigma in (0.5, 1.0, 2.0, 4.0):
        out = ss.adaptive_smooth(field, np.full((1, 1, 40, 40), sigma))[0, 0, 17:24, 17:24]
        tv.append(np.abs(np.diff(out, axis=0)).sum() + np.abs(np.diff(out, axis=1)).sum())
    assert all(a >= b for a, b in zip(tv, tv[1:]))


def test_backends_agree_on_variable_sigma():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(8)
    field = rng.standard_normal((2, 4, 11, 9))
    sig = ss.SIGMA_MIN + rng.random((2, 1, 11, 9)) * 4
    grad = rng.standard_normal(field.shape)
    c, p = _backend.load("cython"), _backend.load("python")
    np.testing.assert_allclose(ss.adaptive_smooth(field, sig, backend=c),
                               ss.adaptive_smooth(field, sig, backend=p), rtol=0, atol=1e-12)
    for a, b in zip(ss.adaptive_smooth_backward(grad, field, sig, backend=c),
                    ss.adaptive_smooth_backward(grad, field, sig, backend=p)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-11)


def _random_sigma_map(rng, shape):
    # stay clear of the ceil(3 sigma) radius switch points so finite differences are smooth
    sig = ss.SIGMA_MIN + rng.random(shape) * 3.0
    frac = (3 * sig) % 1.0
    return np.where((frac < 0.05) | (frac > 0.95), sig + 0.04, sig)


@pytest.mark.parametrize("backend", BACKENDS)
def test_smooth_backward_matches_finite_differences(backend):
    kernels = _backend.load(backend)
    rng = np.random.default_rng(21)
    field = rng.standard_normal((1, 2, 8, 8))
    sig = _random_sigma_map(rng, (1, 1, 8, 8))
    g = rng.standard_normal(field.shape)

    def loss():
        return float(np.sum(g * ss.adaptive_smooth(field, sig, backend=kernels)))

    grad_field, grad_sig = ss.adaptive_smooth_backward(g, field, sig, backend=kernels)
    assert rel_error(grad_field, numeric_grad(loss, field)) < 1e-5
    assert rel_error(grad_sig, numeric_grad(loss, sig)) < 1e-5


def test_smooth_backward_zero_and_constant_cases():
    rng = np.random.default_rng(4)
    sig = _random_sigma_map(rng, (1, 1, 10, 10))
    field = rng.standard_normal((1, 2, 10, 10))
    gf, gs = ss.adaptive_smooth_backward(np.zeros_like(field), field, sig)
    assert not gf.any() and not gs.any()
    gf, gs = ss.adaptive_smooth_backward(rng.standard_normal(field.shape), np.full_like(field, 3.0), sig)
    np.testing.assert_allclose(gs, 0.0, atol=1e-12)


def test_smooth_validates_inputs():
    field = np.zeros((1, 2, 4, 4))
    with pytest.raises(ShapeError):
        ss.adaptive_smooth(field, np.ones((1, 1, 4, 5)))
    with pytest.raises(ValueError, match="sigma_min"):
        ss.adaptive_smooth(field, np.full((1, 1, 4, 4), 0.1))
    with pytest.raises(ValueError):
        ss.adaptive_smooth(field, np.ones((1, 1, 4, 4)), radius_cap=0)


def test_sigma_link_values_and_derivative():
    raw = np.array([0.0, -50.0, 30.0, 800.0]).reshape(1, 1, 1, 4)
    sig = ss.sigma_link(raw)[0, 0, 0]
    assert sig[0] == pytest.approx(ss.SIGMA_MIN + math.log(2.0), abs=1e-15)
    assert sig[1] == pytest.approx(ss.SIGMA_MIN, abs=1e-20)
    # ln(1 + e^30) = 30 + ln(1 + e^-30)
    assert sig[2] == pytest.approx(ss.SIGMA_MIN + 30.0 + math.log1p(math.exp(-30.0)), abs=1e-12)
    assert np.isfinite(sig[3])
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 3)) * 3
    numeric = numeric_grad(lambda: float(ss.sigma_link(x).sum()), x)
    assert rel_error(ss.sigma_link_backward(np.ones_like(x), x), numeric) < 1e-8
