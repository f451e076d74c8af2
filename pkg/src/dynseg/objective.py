"""Inference and training objectives over per-pixel class probabilities.

The unsupervised inference loss is the sum of pixel entropies over the
pixels whose entropy exceeds the image mean; cross-entropy against truth
drives training and the oracle/adversary bounds. All gradients are taken
with respect to the pre-softmax logits.
"""

from dataclasses import dataclass

import numpy as np

from dynseg.tensor import ShapeError

LOG_FLOOR = 1e-12
SUM_TOLERANCE = 1e-5


@dataclass
class EntropyState:
    entropy_map: np.ndarray  # (n, 1, h, w), nats
    mean: float
    active_mask: np.ndarray  # (n, 1, h, w) bool
    loss: float
    fallback: bool = False  # True when no pixel exceeded the mean


def _check_probs(probs):
    if probs.ndim != 4:
        raise ShapeError(f"expected probabilities (n, c, h, w), got {probs.shape}")
    if np.any(probs < 0):
        raise ValueError("probabilities must be non-negative")
    sums = probs.sum(axis=1, dtype=np.float64)
    worst = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
    if worst > SUM_TOLERANCE:
        raise ValueError(f"probabilities do not sum to 1 per pixel (max deviation {worst:.3g})")


def _log(probs):
    return np.log(np.maximum(probs, LOG_FLOOR))


def entropy_map(probs):
    """Shannon entropy per pixel in nats, using 0 ln 0 = 0."""
    _check_probs(probs)
    return -(probs * _log(probs)).sum(axis=1, keepdims=True)


def thresholded_entropy_loss(probs):
    """Sum of entropies over pixels strictly above the mean entropy.

    If no pixel is strictly above the mean (a flat entropy map), every
    pixel counts so the gradient does not stall.
    """
    return threshold_entropy_map(entropy_map(probs))


def threshold_entropy_map(h):
    """Build the :class:`EntropyState` for a precomputed entropy map."""
    mean = float(h.mean(dtype=np.float64))
    mask = h > mean
    # all pixels "above" their own mean is only possible through rounding on a flat map
    fallback = not mask.any() or bool(mask.all())
    if fallback:
        mask = np.ones_like(mask)
    loss = float(h[mask].sum(dtype=np.float64))
    return EntropyState(h, mean, mask, loss, fallback)


def thresholded_entropy_backward(probs, state):
    """Gradient of the thresholded loss with respect to logits, mask held fixed."""
    if state.entropy_map.shape != (probs.shape[0], 1) + probs.shape[2:]:
        raise ShapeError(f"entropy state {state.entropy_map.shape} does not match probabilities {probs.shape}")
    # dH/dz_k = -p_k (ln p_k + H)
    grad = -probs * (_log(probs) + state.entropy_map)
    return np.where(state.active_mask, grad, 0).astype(probs.dtype, copy=False)


def cross_entropy_loss(probs, labels, ignore_label=255):
    """Mean ``-ln p[label]`` over non-ignored pixels and its logit gradient.

    ``labels`` is an integer map ``(n, h, w)`` (or ``(h, w)`` for a single image).
    """
    _check_probs(probs)
    n, c, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"label values out of range [0, {c}): {np.unique(labels[bad]).tolist()}")
    count = int(valid.sum())
    grad = np.zeros_like(probs)
    if count == 0:
        return 0.0, grad
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    loss = float(-(_log(picked)[valid]).sum(dtype=np.float64) / count)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe[:, None], 1, axis=1)
    grad = np.where(valid[:, None], (probs - onehot) / count, 0).astype(probs.dtype, copy=False)
    return loss, grad
