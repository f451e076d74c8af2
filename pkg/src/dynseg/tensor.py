"""Dense NCHW tensor ops with hand-written backward passes.

Tensors are plain 4-D numpy arrays ``(n, c, h, w)``. Precision is the
array dtype (float32 "single" or float64 "double") and is preserved by
every op. Convolutions are cross-correlations with stride 1.
"""

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent."""


def as_tensor(data, precision="single"):
    """Validate and convert ``data`` into a contiguous 4-D tensor.

    Rejects anything that is not 4-D or contains NaN/Inf.
    """
    try:
        dtype = PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}") from None
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected 4-D (n, c, h, w) tensor, got dims {arr.shape}")
    check_finite(arr)
    return arr


def check_finite(arr, name="tensor"):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise ValueError(f"{name} contains {bad} non-finite values")
    return arr


def precision_of(arr):
    for name, dtype in PRECISIONS.items():
        if arr.dtype == dtype:
            return name
    raise ValueError(f"unsupported dtype {arr.dtype}")


# --- convolution -----------------------------------------------------------


def _check_conv(x, weights, bias):
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weights, got {x.shape} and {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got weights {weights.shape}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input channels do not match weights: input {x.shape}, weights {weights.shape}")
    if bias is not None and np.shape(bias) != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {np.shape(bias)}")


def _wide_views(x, k, padding):
    """Padded input flattened per channel, plus the geometry of its tap windows.

    With the padded image stored row-major at width ``wp``, the window of tap
    ``(di, dj)`` is the contiguous run ``flat[..., di * wp + dj:][:span]``:
    output rows come out ``wp`` wide, the last ``wp - wo`` columns of each
    row being junk that callers drop. This avoids copying a patch per tap.
    """
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho, wo = hp - k + 1, wp - k + 1
    flat = np.ascontiguousarray(x).reshape(n, c, hp * wp)
    span = (ho - 1) * wp + wo
    return flat, ho, wo, wp, span


def _narrow(wide, ho, wo, wp):
    """Drop the junk columns of a ``(n, c, span)`` wide-row result."""
    n, c, span = wide.shape
    full = np.zeros((n, c, ho * wp), dtype=wide.dtype)
    full[:, :, :span] = wide
    return full.reshape(n, c, ho, wp)[:, :, :, :wo]


def conv2d(x, weights, bias=None, padding=0):
    """Stride-1 cross-correlation with zero padding.

    Output dims are ``(n, c_out, h - k + 1 + 2p, w - k + 1 + 2p)``.
    """
    _check_conv(x, weights, bias)
    n, _, h, w = x.shape
    c_out, c_in, k, _ = weights.shape
    ho, wo = h - k + 1 + 2 * padding, w - k + 1 + 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape} too small for kernel {weights.shape} with padding {padding}")
    if k == 1 and padding == 0:
        out = np.matmul(weights[:, :, 0, 0], x.reshape(n, c_in, -1))
    else:
        taps = np.ascontiguousarray(weights.transpose(2, 3, 0, 1))
        flat, _, _, wp, span = _wide_views(x, k, padding)
        wide = np.zeros((n, c_out, span), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                off = di * wp + dj
                wide += np.matmul(taps[di, dj], flat[:, :, off:off + span])
        out = _narrow(wide, ho, wo, wp)
    out = np.ascontiguousarray(out.reshape(n, c_out, ho, wo))
    if bias is not None:
        out += bias.reshape(1, c_out, 1, 1).astype(x.dtype, copy=False)
    return out.astype(x.dtype, copy=False)


def conv2d_grad_params(grad_out, x, weights, padding=0):
    """Gradients of ``sum(grad_out * conv2d(x))`` with respect to weights and bias."""
    n = x.shape[0]
    c_out, c_in, k, _ = weights.shape
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.zeros(weights.shape, dtype=x.dtype)
    flat, ho, wo, wp, span = _wide_views(x, k, padding)
    # zero-filled junk columns make the wide products sum over valid positions only
    g = np.zeros((n, c_out, ho, wp), dtype=grad_out.dtype)
    g[:, :, :, :wo] = grad_out
    g = g.reshape(n, c_out, ho * wp)[:, :, :span]
    for di in range(k):
        for dj in range(k):
            off = di * wp + dj
            grad_w[:, :, di, dj] = np.matmul(g, flat[:, :, off:off + span].transpose(0, 2, 1)).sum(axis=0)
    return grad_w, grad_bias.astype(x.dtype, copy=False)


def conv2d_grad_input(grad_out, x_shape, weights, padding=0):
    """Gradient of ``sum(grad_out * conv2d(x))`` with respect to ``x``."""
    n = grad_out.shape[0]
    c_out, c_in, k, _ = weights.shape
    if k == 1 and padding == 0:
        g = grad_out.reshape(n, c_out, -1)
        return np.matmul(weights[:, :, 0, 0].T, g).reshape(x_shape)
    # full correlation with the flipped, transposed kernel, then crop the padding
    flipped = np.ascontiguousarray(weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    grad_padded = conv2d(grad_out, flipped, None, padding=k - 1)
    h, w = x_shape[2], x_shape[3]
    return np.ascontiguousarray(grad_padded[:, :, padding:padding + h, padding:padding + w])


def conv2d_backward(grad_out, x, weights, padding=0):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d`."""
    _check_conv(x, weights, None)
    expected = (x.shape[0], weights.shape[0],
                x.shape[2] - weights.shape[2] + 1 + 2 * padding,
                x.shape[3] - weights.shape[3] + 1 + 2 * padding)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out dims {grad_out.shape} do not match forward output dims {expected}")
    grad_w, grad_b = conv2d_grad_params(grad_out, x, weights, padding)
    grad_x = conv2d_grad_input(grad_out, x.shape, weights, padding)
    return grad_x, grad_w, grad_b


# --- pointwise, pooling, resampling -----------------------------------------


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def avgpool2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(grad_out):
    g = np.repeat(np.repeat(grad_out, 2, axis=2), 2, axis=3)
    return g * np.asarray(0.25, dtype=grad_out.dtype)


def _interp_matrix(size, factor, dtype):
    """Linear interpolation weights with pixel centers at i + 0.5."""
    out_size = size * factor
    src = (np.arange(out_size) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    mat = np.zeros((out_size, size))
    rows = np.arange(out_size)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat.astype(dtype)


def upsample_bilinear(x, factor):
    """Bilinear upsampling by a positive integer factor (align_corners=False)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    mh = _interp_matrix(x.shape[2], factor, x.dtype)
    mw = _interp_matrix(x.shape[3], factor, x.dtype)
    return np.ascontiguousarray(mh @ x @ mw.T)


def upsample_bilinear_backward(grad_out, factor):
    factor = int(factor)
    h, w = grad_out.shape[2] // factor, grad_out.shape[3] // factor
    mh = _interp_matrix(h, factor, grad_out.dtype)
    mw = _interp_matrix(w, factor, grad_out.dtype)
    return np.ascontiguousarray(mh.T @ grad_out @ mw)


def softmax_channels(x):
    """Softmax over the channel axis, independently at every pixel."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
