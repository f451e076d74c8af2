"""Continuous-sigma Gaussian kernels and per-pixel adaptive smoothing.

Every pixel of a feature map is blurred with its own normalized Gaussian,
whose sigma comes from a one-channel ``SigmaMap``. Both the forward pass
and the gradients with respect to the field and the sigma map are
provided; the inner loops run in the compiled backend when available.
"""

import math
from dataclasses import dataclass

import numpy as np

from dynseg import _backend
from dynseg.tensor import ShapeError

SIGMA_MIN = 0.3
RADIUS_CAP = 12


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    radius: int
    taps: np.ndarray  # (2r+1, 2r+1), sums to 1


def _axis_taps(sigma, radius):
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    e = np.exp(-0.5 * (u / sigma) ** 2)
    return u, e / e.sum()


def gaussian_kernel(sigma, radius):
    """Normalized 2-D Gaussian taps on the square ``[-radius, radius]^2``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    _, a = _axis_taps(sigma, radius)
    return GaussianKernel(float(sigma), int(radius), np.outer(a, a))


def kernel_dsigma(sigma, radius):
    """Derivative of every normalized tap of :func:`gaussian_kernel` with respect to sigma."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    u, a = _axis_taps(sigma, radius)
    m2 = float(np.dot(a, u * u))
    k = np.outer(a, a)
    sq = u[:, None] ** 2 + u[None, :] ** 2
    return k * (sq - 2.0 * m2) / sigma**3


def kernel_radius(sigma, radius_cap=RADIUS_CAP):
    return min(int(math.ceil(3.0 * sigma)), radius_cap)


def _check_smooth_args(field, sigmas, radius_cap):
    if field.ndim != 4 or sigmas.ndim != 4 or sigmas.shape[1] != 1:
        raise ShapeError(f"expected field (n, c, h, w) and sigmas (n, 1, h, w), got {field.shape} and {sigmas.shape}")
    if field.shape[0] != sigmas.shape[0] or field.shape[2:] != sigmas.shape[2:]:
        raise ShapeError(f"spatial dims differ: field {field.shape}, sigmas {sigmas.shape}")
    if radius_cap < 1:
        raise ValueError(f"radius_cap must be >= 1, got {radius_cap}")
    smallest = float(sigmas.min())
    if smallest < SIGMA_MIN * (1 - 1e-6):
        raise ValueError(f"sigma {smallest} below sigma_min {SIGMA_MIN}")


def _channels_last(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def adaptive_smooth(field, sigmas, radius_cap=RADIUS_CAP, backend=None):
    """Blur every pixel with a Gaussian of its own sigma.

    ``out[c, i, j] = sum_uv K(sigma_ij)[u, v] * field[c, i+u, j+v]`` with
    radius ``min(ceil(3 sigma_ij), radius_cap)`` and reflected borders.
    """
    _check_smooth_args(field, sigmas, radius_cap)
    kernels = backend or _backend.kernels
    sig = np.ascontiguousarray(sigmas[:, 0], dtype=np.float64)
    out = kernels.smooth_forward(_channels_last(field), sig, int(radius_cap))
    return np.ascontiguousarray(np.asarray(out).transpose(0, 3, 1, 2))


def adaptive_smooth_backward(grad_out, field, sigmas, radius_cap=RADIUS_CAP, backend=None):
    """Return ``(grad_field, grad_sigmas)`` for :func:`adaptive_smooth`."""
    _check_smooth_args(field, sigmas, radius_cap)
    if grad_out.shape != field.shape:
        raise ShapeError(f"grad_out dims {grad_out.shape} do not match field dims {field.shape}")
    kernels = backend or _backend.kernels
    sig = np.ascontiguousarray(sigmas[:, 0], dtype=np.float64)
    grad_field, grad_sig = kernels.smooth_backward(
        _channels_last(grad_out.astype(field.dtype, copy=False)), _channels_last(field), sig, int(radius_cap)
    )
    grad_field = np.ascontiguousarray(np.asarray(grad_field).transpose(0, 3, 1, 2))
    grad_sig = np.asarray(grad_sig)[:, None].astype(field.dtype)
    return grad_field, grad_sig


def softplus(x):
    # log1p(exp(-|x|)) keeps large inputs from overflowing
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)


def sigma_link(raw, sigma_min=SIGMA_MIN):
    """Map raw regressor output to a sigma map bounded below by ``sigma_min``."""
    return (sigma_min + softplus(raw)).astype(raw.dtype, copy=False)


def sigma_link_backward(grad_sigmas, raw):
    return grad_sigmas * sigmoid(raw)
