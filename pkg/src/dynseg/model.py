"""Toy fully convolutional segmenter with a dynamic Gaussian receptive-field head.

Backbone (frozen at test time)::

    conv3x3(c_in->16) relu pool2  conv3x3(16->32) relu pool2
    conv3x3(32->64) relu  upsample x4                         -> features F

Head::

    scale: conv1x1(64->1) -> sigma link -> sigma map
    smooth F per pixel with its sigma
    free:  conv3x3(64->64) relu
    score: conv1x1(64->C) -> logits -> softmax

Only ``score`` and ``scale`` are adapted during inference.
"""

import copy
import hashlib
import struct
from dataclasses import dataclass, fields

import numpy as np

from dynseg import scalespace as ss
from dynseg import tensor as T

WIDTHS = (16, 32, 64)
# fixed input standardization for images in [0, 1]
INPUT_MEAN = 0.5
INPUT_STD = 0.25
INITIAL_SIGMA = 1.0
SCALE_INIT_GAIN = 0.1


class _Params:
    """Shared helpers for the parameter dataclasses."""

    prefix = ""

    def named(self):
        return {f"{self.prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        return type(self)(**{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})


@dataclass
class BackboneParams(_Params):
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray

    prefix = "backbone"


@dataclass
class HeadParams(_Params):
    scale_w: np.ndarray
    scale_b: np.ndarray
    free_w: np.ndarray
    free_b: np.ndarray
    score_w: np.ndarray
    score_b: np.ndarray

    prefix = "head"

    @property
    def num_classes(self):
        return self.score_w.shape[0]


@dataclass
class BackboneCache:
    image: np.ndarray
    z1: np.ndarray
    p1: np.ndarray
    z2: np.ndarray
    p2: np.ndarray
    z3: np.ndarray
    a3: np.ndarray


@dataclass
class ForwardCache:
    features: np.ndarray
    raw_scale: np.ndarray
    sigma: np.ndarray
    smoothed: np.ndarray
    free_pre: np.ndarray
    free_act: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    backbone: BackboneCache | None = None

    def prediction(self):
        return self.probs.argmax(axis=1)


def init_params(seed, c_in=1, num_classes=4, dtype=np.float32):
    """He-initialized weights and zero biases; the scale bias starts sigma near 1."""
    rng = np.random.default_rng(seed)

    def he(c_out, c_inp, k, gain=1.0):
        std = gain * np.sqrt(2.0 / (c_inp * k * k))
        return (rng.standard_normal((c_out, c_inp, k, k)) * std).astype(dtype)

    def zeros(c):
        return np.zeros(c, dtype=dtype)

    w1, w2, w3 = WIDTHS
    backbone = BackboneParams(
        he(w1, c_in, 3), zeros(w1),
        he(w2, w1, 3), zeros(w2),
        he(w3, w2, 3), zeros(w3),
    )
    # softplus(b) = INITIAL_SIGMA - SIGMA_MIN
    scale_bias = np.log(np.expm1(INITIAL_SIGMA - ss.SIGMA_MIN))
    head = HeadParams(
        he(1, w3, 1, gain=SCALE_INIT_GAIN), np.full(1, scale_bias, dtype=dtype),
        he(w3, w3, 3), zeros(w3),
        he(num_classes, w3, 1), zeros(num_classes),
    )
    return backbone, head


# --- forward -----------------------------------------------------------------


def forward_backbone(image, backbone):
    if image.ndim != 4:
        raise T.ShapeError(f"image must be (n, c, h, w), got {image.shape}")
    if image.shape[2] % 4 or image.shape[3] % 4:
        raise T.ShapeError(f"image height and width must be divisible by 4, got {image.shape}")
    image = (image - np.asarray(INPUT_MEAN, image.dtype)) / np.asarray(INPUT_STD, image.dtype)
    z1 = T.conv2d(image, backbone.conv1_w, backbone.conv1_b, padding=1)
    p1 = T.avgpool2(T.relu(z1))
    z2 = T.conv2d(p1, backbone.conv2_w, backbone.conv2_b, padding=1)
    p2 = T.avgpool2(T.relu(z2))
    z3 = T.conv2d(p2, backbone.conv3_w, backbone.conv3_b, padding=1)
    a3 = T.relu(z3)
    features = T.upsample_bilinear(a3, 4)
    return features, BackboneCache(image, z1, p1, z2, p2, z3, a3)


def forward_head(features, head, radius_cap=ss.RADIUS_CAP):
    """Re-run only the head on cached backbone features."""
    if features.ndim != 4 or features.shape[1] != head.free_w.shape[1]:
        raise T.ShapeError(f"features {features.shape} do not match head input width {head.free_w.shape[1]}")
    raw = T.conv2d(features, head.scale_w, head.scale_b)
    sigma = ss.sigma_link(raw)
    smoothed = ss.adaptive_smooth(features, sigma, radius_cap)
    free_pre = T.conv2d(smoothed, head.free_w, head.free_b, padding=1)
    free_act = T.relu(free_pre)
    cache = ForwardCache(features, raw, sigma, smoothed, free_pre, free_act, None, None)
    return rescore(cache, head)


def rescore(cache, head):
    """Recompute logits and probabilities from a cache's head activations.

    Valid whenever only the score parameters changed since ``cache`` was built.
    """
    logits = T.conv2d(cache.free_act, head.score_w, head.score_b)
    return ForwardCache(cache.features, cache.raw_scale, cache.sigma, cache.smoothed,
                        cache.free_pre, cache.free_act, logits, T.softmax_channels(logits), cache.backbone)


def forward_full(image, backbone, head, radius_cap=ss.RADIUS_CAP):
    features, bcache = forward_backbone(image, backbone)
    cache = forward_head(features, head, radius_cap)
    cache.backbone = bcache
    return cache


# --- backward ----------------------------------------------------------------


def head_backward(cache, grad_logits, head, wrt=("score", "scale"), radius_cap=ss.RADIUS_CAP,
                  need_features=False):
    """Gradients of a logit-space loss with respect to selected head parameters.

    ``wrt`` may include ``"score"``, ``"scale"`` and ``"free"``. Returns a
    dict keyed by parameter field name; with ``need_features`` it also holds
    ``"features"``, the gradient flowing back into the backbone.
    """
    if grad_logits.shape != cache.logits.shape:
        raise T.ShapeError(f"grad_logits {grad_logits.shape} does not match cached logits {cache.logits.shape}")
    wrt = set(wrt)
    grads = {}
    if "score" in wrt:
        grads["score_w"], grads["score_b"] = T.conv2d_grad_params(grad_logits, cache.free_act, head.score_w)
    if not (wrt & {"scale", "free"} or need_features):
        return grads
    g_act = T.conv2d_grad_input(grad_logits, cache.free_act.shape, head.score_w)
    g_pre = T.relu_backward(g_act, cache.free_pre)
    if "free" in wrt:
        grads["free_w"], grads["free_b"] = T.conv2d_grad_params(g_pre, cache.smoothed, head.free_w, padding=1)
    if not ("scale" in wrt or need_features):
        return grads
    g_smooth = T.conv2d_grad_input(g_pre, cache.smoothed.shape, head.free_w, padding=1)
    g_feat, g_sigma = ss.adaptive_smooth_backward(g_smooth, cache.features, cache.sigma, radius_cap)
    g_raw = ss.sigma_link_backward(g_sigma, cache.raw_scale)
    if "scale" in wrt:
        grads["scale_w"], grads["scale_b"] = T.conv2d_grad_params(g_raw, cache.features, head.scale_w)
    if need_features:
        grads["features"] = g_feat + T.conv2d_grad_input(g_raw, cache.features.shape, head.scale_w)
    return grads


def backbone_backward(bcache, grad_features, backbone):
    g_a3 = T.upsample_bilinear_backward(grad_features, 4)
    g_z3 = T.relu_backward(g_a3, bcache.z3)
    g_p2, gw3, gb3 = T.conv2d_backward(g_z3, bcache.p2, backbone.conv3_w, padding=1)
    g_z2 = T.relu_backward(T.avgpool2_backward(g_p2), bcache.z2)
    g_p1, gw2, gb2 = T.conv2d_backward(g_z2, bcache.p1, backbone.conv2_w, padding=1)
    g_z1 = T.relu_backward(T.avgpool2_backward(g_p1), bcache.z1)
    gw1, gb1 = T.conv2d_grad_params(g_z1, bcache.image, backbone.conv1_w, padding=1)
    return {"conv1_w": gw1, "conv1_b": gb1, "conv2_w": gw2, "conv2_b": gb2, "conv3_w": gw3, "conv3_b": gb3}


def full_backward(cache, grad_logits, backbone, head, radius_cap=ss.RADIUS_CAP):
    """Gradients for every parameter: ``(backbone_grads, head_grads)``."""
    if cache.backbone is None:
        raise ValueError("cache has no backbone activations; use forward_full")
    hgrads = head_backward(cache, grad_logits, head, wrt=("score", "scale", "free"),
                           radius_cap=radius_cap, need_features=True)
    bgrads = backbone_backward(cache.backbone, hgrads.pop("features"), backbone)
    return bgrads, hgrads


# --- persistence -------------------------------------------------------------

MAGIC = b"SADP"
FORMAT_VERSION = 1
_PRECISION_TAGS = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


class CheckpointError(ValueError):
    pass


def params_digest(backbone, head):
    """SHA-256 over every parameter's name, dims and raw bytes."""
    h = hashlib.sha256()
    for name, arr in {**backbone.named(), **head.named()}.items():
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _dims4(arr):
    dims = list(arr.shape) + [1] * (4 - arr.ndim)
    if len(dims) != 4:
        raise CheckpointError(f"cannot store a {arr.ndim}-D tensor")
    return dims


def save_checkpoint(path, backbone, head):
    named = {**backbone.named(), **head.named()}
    dtypes = {arr.dtype for arr in named.values()}
    if len(dtypes) != 1:
        raise CheckpointError(f"mixed parameter precisions: {sorted(map(str, dtypes))}")
    dtype = dtypes.pop()
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, _PRECISION_TAGS[dtype], len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4I", *_dims4(arr)))
        parts.append(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, tag, count = struct.unpack_from("<III", blob, 4)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    dtype = {v: k for k, v in _PRECISION_TAGS.items()}.get(tag)
    if dtype is None:
        raise CheckpointError(f"{path}: unknown precision tag {tag}")
    offset = 16
    tensors = {}
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + length].decode("utf-8")
            offset += length
            dims = struct.unpack_from("<4I", blob, offset)
            offset += 16
            size = int(np.prod(dims))
            nbytes = size * dtype.itemsize
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated payload for {name!r} at byte {offset}")
            arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=size, offset=offset)
            offset += nbytes
            tensors[name] = arr.astype(dtype).reshape(dims)
    except struct.error:
        raise CheckpointError(f"{path}: truncated at byte {offset}") from None

    def build(cls):
        kwargs = {}
        for f in fields(cls):
            key = f"{cls.prefix}.{f.name}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key!r}")
            arr = tensors[key]
            kwargs[f.name] = arr.reshape(arr.shape[0]) if f.name.endswith("_b") else arr
        return cls(**kwargs)

    return build(BackboneParams), build(HeadParams)
