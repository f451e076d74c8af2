"""Independent oracles shared by the test modules."""

import numpy as np


def conv2d_loops(x, w, b, padding):
    """Direct nested-loop cross-correlation."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h - k + 1 + 2 * padding, wd - k + 1 + 2 * padding
    out = np.zeros((n, c_out, ho, wo))
    for b_ in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for c in range(c_in):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, c, u, v] * xp[b_, c, i + u, j + v]
                    out[b_, o, i, j] = acc
    return out


def numeric_grad(fn, x, step=1e-5):
    """Central finite differences of scalar ``fn`` over every entry of ``x`` (in place)."""
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        up = fn()
        flat[idx] = orig - step
        down = fn()
        flat[idx] = orig
        grad.reshape(-1)[idx] = (up - down) / (2 * step)
    return grad


def rel_error(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom) if denom > 0 else 0.0


def gaussian_blur_reflect(field, sigma, radius):
    """Plain single-kernel Gaussian filter with numpy-style reflect padding."""
    u = np.arange(-radius, radius + 1)
    g = np.exp(-(u[:, None] ** 2 + u[None, :] ** 2) / (2.0 * sigma**2))
    g /= g.sum()
    n, c, h, w = field.shape
    out = np.zeros(field.shape)
    padded = np.pad(field, ((0, 0), (0, 0), (radius, radius), (radius, radius)), mode="reflect")
    for a in range(2 * radius + 1):
        for b in range(2 * radius + 1):
            out += g[a, b] * padded[:, :, a:a + h, b:b + w]
    return out
