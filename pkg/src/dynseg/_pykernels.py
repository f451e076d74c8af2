"""Pure numpy versions of the per-pixel smoothing kernels.

Same signatures and layouts as the compiled module: fields are
channel-last ``(n, h, w, c)``, sigma maps are float64 ``(n, h, w)``.
Instead of looping over pixels, these loop over kernel offsets and apply
each offset's per-pixel weight map to a reflected shift of the field.
"""

import numpy as np


def reflect_index(p, n):
    """Mirror indices into ``[0, n)`` without repeating the edge sample."""
    p = np.asarray(p)
    if n == 1:
        return np.zeros_like(p)
    period = 2 * (n - 1)
    p = np.mod(p, period)
    return np.where(p >= n, period - p, p)


def _tap_maps(sigma, cap):
    """Per-pixel normalized 1-D taps for every offset up to the largest radius.

    Returns ``(radius, taps, m2, max_radius)`` with ``taps[u + R]`` an
    ``(n, h, w)`` map that is zero wherever ``|u|`` exceeds the pixel radius.
    """
    radius = np.minimum(np.ceil(3.0 * sigma), cap).astype(np.int64)
    big_r = int(radius.max()) if radius.size else 0
    offsets = np.arange(-big_r, big_r + 1)
    t = offsets[:, None, None, None] / sigma[None]
    taps = np.exp(-0.5 * t * t)
    taps = np.where(np.abs(offsets)[:, None, None, None] <= radius[None], taps, 0.0)
    taps /= taps.sum(axis=0, keepdims=True)
    m2 = np.einsum("k,knhw->nhw", offsets.astype(np.float64) ** 2, taps)
    return radius, taps, m2, big_r


def _shift_indices(h, w, u, v):
    rows = reflect_index(np.arange(h) + u, h)
    cols = reflect_index(np.arange(w) + v, w)
    return rows, cols


def smooth_forward(field, sigma, cap):
    n, h, w, c = field.shape
    _, taps, _, big_r = _tap_maps(sigma, cap)
    out = np.zeros_like(field)
    for iu, u in enumerate(range(-big_r, big_r + 1)):
        for iv, v in enumerate(range(-big_r, big_r + 1)):
            weight = (taps[iu] * taps[iv]).astype(field.dtype)
            if not weight.any():
                continue
            rows, cols = _shift_indices(h, w, u, v)
            out += weight[..., None] * field[:, rows][:, :, cols]
    return out


def smooth_backward(grad_out, field, sigma, cap):
    n, h, w, c = field.shape
    _, taps, m2, big_r = _tap_maps(sigma, cap)
    grad_field = np.zeros_like(field)
    grad_sigma = np.zeros(sigma.shape, dtype=np.float64)
    batch = np.arange(n)[:, None, None]
    for iu, u in enumerate(range(-big_r, big_r + 1)):
        for iv, v in enumerate(range(-big_r, big_r + 1)):
            k = taps[iu] * taps[iv]
            if not k.any():
                continue
            rows, cols = _shift_indices(h, w, u, v)
            shifted = field[:, rows][:, :, cols]
            dot = np.einsum("nhwc,nhwc->nhw", grad_out, shifted, dtype=np.float64)
            grad_sigma += k * (u * u + v * v - 2.0 * m2) / sigma**3 * dot
            contrib = k.astype(field.dtype)[..., None] * grad_out
            np.add.at(grad_field, (batch, rows[None, :, None], cols[None, None, :]), contrib)
    return grad_field, grad_sigma
