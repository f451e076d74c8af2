"""Episodic inference-time optimization of the score and scale parameters.

An episode starts from the feedforward prediction, then alternates
loss -> head gradients -> Adam update -> partial (head-only) forward
for a fixed number of steps. The trained parameters are never modified;
each episode works on private copies.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from dynseg import data as D
from dynseg import model as M
from dynseg import objective as O

log = logging.getLogger(__name__)

MODES = ("baseline", "entropy", "oracle", "adversary")
VARIABLES = ("score", "scale", "both", "all")
CSV_HEADER = "scale,mode,variables,steps,seed,miou,mean_entropy_initial,mean_entropy_final"

_HEAD_FIELDS = {"score": ("score_w", "score_b"), "scale": ("scale_w", "scale_b")}


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 32
    learning_rate: float = 0.001
    mode: str = "entropy"
    variables: str = "both"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variables not in VARIABLES:
            raise ValueError(f"variables must be one of {VARIABLES}, got {self.variables!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.mode == "baseline" and self.steps != 0:
            object.__setattr__(self, "steps", 0)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place over dicts of arrays.

    Returns the L2 norm of the applied update.
    """
    state.t += 1
    sq = 0.0
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has dims {g.shape}, parameter has {p.shape}")
        g = g.astype(np.float64)
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**state.t)
        v_hat = v / (1 - beta2**state.t)
        update = (-lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        p += update
        sq += float(np.sum(update.astype(np.float64) ** 2))
    return math.sqrt(sq)


@dataclass
class StepRecord:
    step: int
    loss: float
    mean_entropy: float
    update_norm: float
    miou: float | None = None
    inter: np.ndarray | None = None
    union: np.ndarray | None = None
    maps: dict | None = None  # prediction, entropy, sigma when requested


@dataclass
class AdaptTrajectory:
    records: list
    cache: M.ForwardCache
    head: M.HeadParams
    aborted: str | None = None

    def at(self, step):
        """Record for ``step``, or the last one if the episode ended early."""
        return self.records[min(step, len(self.records) - 1)]


def _objective(cfg, probs, truth):
    if cfg.mode in ("entropy", "baseline"):
        state = O.thresholded_entropy_loss(probs)
        return state.loss, (lambda: O.thresholded_entropy_backward(probs, state))
    loss, grad = O.cross_entropy_loss(probs, truth, D.IGNORE_LABEL)
    if cfg.mode == "adversary":
        grad = -grad
    return loss, (lambda: grad)


def _record(step, cache, loss, norm, truth, keep_maps):
    h = O.entropy_map(cache.probs)
    rec = StepRecord(step, loss, float(h.mean(dtype=np.float64)), norm)
    pred = cache.prediction()[0]
    if truth is not None:
        rec.inter, rec.union = D.confusion_counts(pred, truth)
        rec.miou = D.miou_from_counts(rec.inter, rec.union)[1]
    if keep_maps:
        rec.maps = {"prediction": pred.astype(np.uint8), "entropy": h[0, 0], "sigma": cache.sigma[0, 0]}
    return rec


def adapt_episode(image, backbone, head, truth=None, cfg=AdaptConfig(), keep_maps=False):
    """Adapt a private copy of the head to one image.

    ``truth`` is read for updates only in oracle/adversary modes; otherwise
    it only feeds the reported mIoU.
    """
    if cfg.mode in ("oracle", "adversary") and truth is None:
        raise ValueError(f"mode {cfg.mode!r} needs ground-truth labels")
    if truth is not None:
        truth = np.asarray(truth)
    work_head = head.copy()
    work_backbone = backbone.copy() if cfg.variables == "all" else backbone
    cache = M.forward_full(image, work_backbone, work_head)
    loss, grad_fn = _objective(cfg, cache.probs, truth)
    records = [_record(0, cache, loss, 0.0, truth, keep_maps)]
    adam = AdamState()
    aborted = None
    if cfg.variables == "all":
        names = list(M.BackboneParams.__dataclass_fields__) + list(M.HeadParams.__dataclass_fields__)
    else:
        names = [f for key in ("score", "scale") if cfg.variables in (key, "both") for f in _HEAD_FIELDS[key]]
    wrt = [key for key in ("score", "scale") if cfg.variables in (key, "both")]
    for step in range(1, cfg.steps + 1):
        if not math.isfinite(loss):
            aborted = f"non-finite loss at step {step - 1}"
            break
        grad_logits = grad_fn()
        if cfg.variables == "all":
            bgrads, hgrads = M.full_backward(cache, grad_logits, work_backbone, work_head)
            params = {**vars(work_backbone), **vars(work_head)}
            grads = {**bgrads, **hgrads}
        else:
            grads = M.head_backward(cache, grad_logits, work_head, wrt=wrt)
            params = vars(work_head)
        grads = {k: grads[k] for k in names}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            aborted = f"non-finite gradient at step {step}"
            break
        snapshot = {k: params[k].copy() for k in names}
        norm = adam_step(params, grads, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        if cfg.variables == "all":
            new_cache = M.forward_full(image, work_backbone, work_head)
        elif cfg.variables == "score":
            new_cache = M.rescore(cache, work_head)
        else:
            new_cache = M.forward_head(cache.features, work_head)
            new_cache.backbone = cache.backbone
        new_loss, new_grad_fn = _objective(cfg, new_cache.probs, truth)
        if not (math.isfinite(new_loss) and np.all(np.isfinite(new_cache.probs))):
            for k, arr in snapshot.items():
                params[k][...] = arr
            aborted = f"non-finite loss at step {step}"
            break
        cache, loss, grad_fn = new_cache, new_loss, new_grad_fn
        records.append(_record(step, cache, loss, norm, truth, keep_maps))
    if aborted:
        log.warning("episode stopped early: %s; keeping step %d", aborted, records[-1].step)
    return AdaptTrajectory(records, cache, work_head, aborted)


# --- sweeps --------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    scale: float
    mode: str
    variables: str
    steps: int
    seed: int
    miou: float
    mean_entropy_initial: float
    mean_entropy_final: float

    def csv(self):
        return (f"{self.scale:.4f},{self.mode},{self.variables},{self.steps},{self.seed},"
                f"{self.miou:.4f},{self.mean_entropy_initial:.4f},{self.mean_entropy_final:.4f}")


def evaluate_set(scenes, backbone, head, cfg, steps_list, seed, scale):
    """Adapt every scene once up to ``max(steps_list)`` and score each prefix.

    Episodes are deterministic, so the trajectory prefix at ``k`` steps is
    exactly the result of a ``k``-step episode.
    """
    longest = max(steps_list)
    run_cfg = replace(cfg, steps=longest)
    trajectories = [adapt_episode(s.image, backbone, head, s.labels, run_cfg) for s in scenes]
    rows = []
    for steps in sorted(set(steps_list)):
        inter = sum(t.at(steps).inter for t in trajectories)
        union = sum(t.at(steps).union for t in trajectories)
        _, miou = D.miou_from_counts(inter, union)
        rows.append(SweepRow(
            scale, cfg.mode, cfg.variables, steps, seed, miou,
            float(np.mean([t.at(0).mean_entropy for t in trajectories])),
            float(np.mean([t.at(steps).mean_entropy for t in trajectories])),
        ))
    return rows, trajectories


def sweep(backbone, head, seeds, count, scales, cfgs, steps_list=None, size=(64, 64),
          spec=D.GeneratorSpec()):
    """mIoU grid over ``scales x cfgs x seeds``; one row per episode set.

    Each seed defines a test set of ``count`` scenes rendered at every scale.
    ``steps_list`` overrides each config's step count with a grid of
    prefixes (baseline rows always report 0 steps).
    """
    rows = []
    for scale in scales:
        for cfg in cfgs:
            grid = [0] if cfg.mode == "baseline" else (steps_list or [cfg.steps])
            for seed in seeds:
                scenes = D.make_set(seed, count, size, scale, spec)
                set_rows, _ = evaluate_set(scenes, backbone, head, cfg, grid, seed, scale)
                rows.extend(set_rows)
    return rows


def format_csv(rows):
    return "\n".join([CSV_HEADER] + [r.csv() for r in rows]) + "\n"


def parse_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ValueError("missing or unexpected metrics CSV header")
    rows = []
    for ln in lines[1:]:
        scale, mode, variables, steps, seed, miou, h0, h1 = ln.split(",")
        rows.append(SweepRow(float(scale), mode, variables, int(steps), int(seed),
                             float(miou), float(h0), float(h1)))
    return rows
