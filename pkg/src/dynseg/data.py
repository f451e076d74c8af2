"""Synthetic shape scenes with exact labels, PGM dataset I/O, and IoU metrics.

A scene's layout (shape classes, centers, base radii, orientations,
intensities) depends only on its seed. Rendering at scale ``s`` magnifies
that layout by ``s`` about the first shape's center, so radii grow by
exactly ``s``, shapes never overlap at any scale, and at least one shape
stays in view. Labels are the analytic membership of each pixel center.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

BACKGROUND, DISK, SQUARE, TRIANGLE = 0, 1, 2, 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "disk", "square", "triangle")
IGNORE_LABEL = 255
INDEX_NAME = "index.txt"


@dataclass(frozen=True)
class GeneratorSpec:
    min_shapes: int = 1
    max_shapes: int = 4
    radius_range: tuple = (4.0, 10.0)
    # intensity band per class, background first; bands overlap on purpose
    bands: tuple = ((0.0, 0.30), (0.22, 0.54), (0.46, 0.78), (0.70, 1.0))
    # "triangular" peaks each band at its center so neighbouring classes overlap only in their tails
    intensity_profile: str = "triangular"
    noise: float = 0.05
    max_attempts: int = 100
    margin: float = 1.0


@dataclass(frozen=True)
class Shape:
    kind: int
    center: tuple  # (y, x) in pixels, continuous coordinates
    radius: float
    angle: float
    intensity: float


@dataclass
class Scene:
    image: np.ndarray  # (1, 1, h, w) float32 in [0, 1], on the 16-bit grid
    labels: np.ndarray  # (h, w) uint8
    scale: float
    seed: int
    shapes: list = field(default_factory=list)


def scene_seed(set_seed, index):
    """Deterministic per-scene seed for scene ``index`` of a set."""
    return int(np.random.SeedSequence([int(set_seed), int(index)]).generate_state(1)[0])


def _intensity(rng, band, profile):
    lo, hi = band
    if profile == "uniform" or hi <= lo:
        return float(rng.uniform(lo, hi))
    if profile == "triangular":
        return float(rng.triangular(lo, 0.5 * (lo + hi), hi))
    raise ValueError(f"unknown intensity profile {profile!r}")


def _bounding_radius(kind, radius):
    return radius * math.sqrt(2.0) if kind == SQUARE else radius


def sample_layout(seed, size, spec=GeneratorSpec()):
    """Non-overlapping base-scale layout and background intensity for ``seed``."""
    h, w = size
    rng = np.random.default_rng(seed)
    background = _intensity(rng, spec.bands[BACKGROUND], spec.intensity_profile)
    wanted = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    attempts = 0
    while len(shapes) < wanted and attempts < spec.max_attempts:
        attempts += 1
        kind = int(rng.integers(1, NUM_CLASSES))
        radius = float(rng.uniform(*spec.radius_range))
        center = (float(rng.uniform(0, h)), float(rng.uniform(0, w)))
        angle = float(rng.uniform(0, 2 * math.pi))
        intensity = _intensity(rng, spec.bands[kind], spec.intensity_profile)
        candidate = Shape(kind, center, radius, angle, intensity)
        if all(_separated(candidate, other, spec.margin) for other in shapes):
            shapes.append(candidate)
    return background, shapes


def _separated(a, b, margin):
    dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    return dist > _bounding_radius(a.kind, a.radius) + _bounding_radius(b.kind, b.radius) + margin


def magnify(shapes, scale):
    """Scale a layout by ``scale`` about the first shape's center."""
    if not shapes:
        return []
    ay, ax = shapes[0].center
    return [
        Shape(s.kind, (ay + scale * (s.center[0] - ay), ax + scale * (s.center[1] - ax)),
              s.radius * scale, s.angle, s.intensity)
        for s in shapes
    ]


def shape_mask(shape, ys, xs):
    """Membership of points ``(ys, xs)`` in ``shape`` (vectorized)."""
    dy = ys - shape.center[0]
    dx = xs - shape.center[1]
    if shape.kind == DISK:
        return dy * dy + dx * dx <= shape.radius**2
    c, s = math.cos(shape.angle), math.sin(shape.angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if shape.kind == SQUARE:
        return (np.abs(u) <= shape.radius) & (np.abs(v) <= shape.radius)
    if shape.kind == TRIANGLE:
        # equilateral, circumradius r: inside all three edge half-planes at distance r/2
        inside = np.ones(np.broadcast(u, v).shape, dtype=bool)
        for k in range(3):
            phi = 2 * math.pi * k / 3
            inside &= (math.cos(phi) * u + math.sin(phi) * v) <= shape.radius / 2
        return inside
    raise ValueError(f"unknown shape kind {shape.kind}")


def quantize16(image):
    return (np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0).astype(np.float32)


def gen_scene(seed, size=(64, 64), scale=1.0, spec=GeneratorSpec(), noise=True):
    """Render the scene for ``seed`` at ``scale``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = size
    background, base = sample_layout(seed, size, spec)
    shapes = magnify(base, scale)
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    labels = np.zeros((h, w), dtype=np.uint8)
    image = np.full((h, w), background, dtype=np.float64)
    for shape in shapes:
        mask = shape_mask(shape, ys, xs)
        labels[mask] = shape.kind
        image[mask] = shape.intensity
    if noise and spec.noise > 0:
        # noise stream depends on scale too, so regenerated scenes are independent draws
        rng = np.random.default_rng([seed, int(round(scale * 1e6))])
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return Scene(quantize16(image)[None, None], labels, float(scale), int(seed), shapes)


def make_set(set_seed, count, size=(64, 64), scale=1.0, spec=GeneratorSpec()):
    return [gen_scene(scene_seed(set_seed, k), size, scale, spec) for k in range(count)]


def flip_scene(scene):
    return Scene(np.ascontiguousarray(scene.image[..., ::-1]), np.ascontiguousarray(scene.labels[:, ::-1]),
                 scene.scale, scene.seed, scene.shapes)


# --- metrics -------------------------------------------------------------------


def confusion_counts(pred, truth, num_classes=NUM_CLASSES, ignore_label=IGNORE_LABEL):
    """Per-class ``(intersection, union)`` pixel counts."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction dims {pred.shape} differ from truth dims {truth.shape}")
    valid = truth != ignore_label
    p = pred[valid].astype(np.int64)
    t = truth[valid].astype(np.int64)
    inter = np.bincount(t[p == t], minlength=num_classes)[:num_classes]
    area_p = np.bincount(p, minlength=num_classes)[:num_classes]
    area_t = np.bincount(t, minlength=num_classes)[:num_classes]
    return inter, area_p + area_t - inter


def miou_from_counts(inter, union):
    """Mean IoU over classes present in prediction or truth (union > 0)."""
    inter = np.asarray(inter, dtype=np.float64)
    union = np.asarray(union, dtype=np.float64)
    present = union > 0
    per_class = np.full(inter.shape, np.nan)
    per_class[present] = inter[present] / union[present]
    miou = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, miou


def iou(pred, truth, num_classes=NUM_CLASSES, ignore_label=IGNORE_LABEL):
    """Per-class IoU (NaN for absent classes) and their mean."""
    return miou_from_counts(*confusion_counts(pred, truth, num_classes, ignore_label))


# --- PGM dataset I/O -------------------------------------------------------------


class FormatError(ValueError):
    pass


def write_pgm(path, array, maxval):
    array = np.asarray(array)
    h, w = array.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _header_tokens(blob, path):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        tokens.append((blob[start:pos], start))
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary (P5) PGM; returns ``(array, maxval)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, offset = _header_tokens(blob, path)
    (magic, _), *rest = tokens
    if magic != b"P5":
        raise FormatError(f"{path}: expected magic P5 at byte 0, got {magic!r}")
    values = []
    for raw, at in rest:
        try:
            values.append(int(raw))
        except ValueError:
            raise FormatError(f"{path}: malformed header field {raw!r} at byte {at}") from None
    w, h, maxval = values
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid header values width={w} height={h} maxval={maxval}")
    itemsize = 2 if maxval > 255 else 1
    need = w * h * itemsize
    if len(blob) - offset < need:
        raise FormatError(f"{path}: truncated payload at byte {len(blob)}, expected {offset + need} bytes")
    arr = np.frombuffer(blob, dtype=">u2" if itemsize == 2 else "u1", count=w * h, offset=offset)
    return arr.reshape(h, w).astype(np.uint16 if itemsize == 2 else np.uint8), maxval


def _scene_names(idx):
    return f"{idx:05d}_image.pgm", f"{idx:05d}_labels.pgm"


def write_dataset(directory, scenes):
    """Write scenes as 16-bit image PGMs, 8-bit label PGMs and an index file."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for idx, scene in enumerate(scenes):
        img_name, lab_name = _scene_names(idx)
        q = np.round(np.clip(scene.image[0, 0], 0, 1) * 65535.0).astype(np.uint16)
        write_pgm(os.path.join(directory, img_name), q, 65535)
        write_pgm(os.path.join(directory, lab_name), scene.labels, 255)
        h, w = scene.labels.shape
        lines.append(f"{idx} {scene.seed} {scene.scale!r} {h} {w}\n")
    with open(os.path.join(directory, INDEX_NAME), "w") as fh:
        fh.writelines(lines)


def read_index(directory):
    path = os.path.join(directory, INDEX_NAME)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise FormatError(f"{path}: line {lineno}: expected 'id seed scale h w'")
            idx, seed, scale, h, w = parts
            entries.append((int(idx), int(seed), float(scale), int(h), int(w)))
    return entries


def read_dataset(directory, require_labels=True):
    """Read scenes listed in the index; missing label files give ``labels=None``
    unless ``require_labels``."""
    scenes = []
    for idx, seed, scale, h, w in read_index(directory):
        img_name, lab_name = _scene_names(idx)
        q, maxval = read_pgm(os.path.join(directory, img_name))
        lab_path = os.path.join(directory, lab_name)
        labels = None
        if require_labels or os.path.exists(lab_path):
            labels, _ = read_pgm(lab_path)
            labels = labels.astype(np.uint8)
        if q.shape != (h, w) or (labels is not None and labels.shape != (h, w)):
            raise FormatError(f"{directory}: scene {idx} dims disagree with index ({h}x{w})")
        image = (q.astype(np.float64) / maxval).astype(np.float32)
        scenes.append(Scene(image[None, None], labels, scale, seed))
    return scenes
