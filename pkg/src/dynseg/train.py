"""Supervised training: SGD with momentum, weight decay and a poly schedule."""

import math
from dataclasses import dataclass

import numpy as np

from dynseg import data as D
from dynseg import model as M
from dynseg import objective as O
from dynseg import tensor as T

LOG_HEADER = "epoch,lr,loss,train_miou"


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    poly_power: float = 0.9
    augment: str = "none"  # or "scale_flip"
    scale_range: tuple = (0.5, 2.0)
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (self.base_lr > 0 and self.poly_power > 0):
            raise ValueError("base_lr and poly_power must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.augment not in ("none", "scale_flip"):
            raise ValueError(f"unknown augmentation {self.augment!r}")


def poly_lr(iteration, max_iter, base_lr, power):
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """One SGD update in place over matching dicts of arrays.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    for name, grad in grads.items():
        p = params[name]
        if grad.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has dims {grad.shape}, parameter has {p.shape}")
        v = velocity.setdefault(name, np.zeros_like(p))
        v *= momentum
        v += grad + weight_decay * p
        p -= (lr * v).astype(p.dtype, copy=False)
    return params, velocity


def _augment(scene, rng, cfg, spec):
    scale = float(rng.uniform(*cfg.scale_range))
    flip = bool(rng.random() < 0.5)
    h, w = scene.labels.shape
    out = D.gen_scene(scene.seed, (h, w), scene.scale * scale, spec)
    return D.flip_scene(out) if flip else out


def train_model(scenes, cfg=TrainConfig(), spec=D.GeneratorSpec(), init_seed=None, progress=None,
                on_step=None):
    """Train all parameters on ``scenes``; returns ``(backbone, head, log_rows)``.

    Each log row is ``(epoch, lr, mean_loss, train_miou)``. Scale
    augmentation re-renders a scene from its seed at the sampled scale.
    ``progress`` receives each log row, ``on_step`` each ``(iteration, loss)``.
    """
    cfg.validate()
    if not scenes:
        raise ValueError("training set is empty")
    num_classes = D.NUM_CLASSES
    backbone, head = M.init_params(cfg.seed if init_seed is None else init_seed,
                                   scenes[0].image.shape[1], num_classes)
    velocity = {"backbone": {}, "head": {}}
    rng = np.random.default_rng([cfg.seed, 7])
    steps_per_epoch = math.ceil(len(scenes) / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    iteration = 0
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        losses = []
        inter = np.zeros(num_classes, dtype=np.int64)
        union = np.zeros(num_classes, dtype=np.int64)
        lr = poly_lr(iteration, max_iter, cfg.base_lr, cfg.poly_power)
        for start in range(0, len(scenes), cfg.batch_size):
            batch = [scenes[k] for k in order[start:start + cfg.batch_size]]
            if cfg.augment == "scale_flip":
                batch = [_augment(s, rng, cfg, spec) for s in batch]
            images = np.concatenate([s.image for s in batch]).astype(backbone.conv1_w.dtype)
            labels = np.stack([s.labels for s in batch])
            cache = M.forward_full(images, backbone, head)
            loss, grad_logits = O.cross_entropy_loss(cache.probs, labels, D.IGNORE_LABEL)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at iteration {iteration}")
            bgrads, hgrads = M.full_backward(cache, grad_logits, backbone, head)
            lr = poly_lr(iteration, max_iter, cfg.base_lr, cfg.poly_power)
            sgd_step(vars(backbone), bgrads, velocity["backbone"], lr, cfg.momentum, cfg.weight_decay)
            sgd_step(vars(head), hgrads, velocity["head"], lr, cfg.momentum, cfg.weight_decay)
            if on_step is not None:
                on_step(iteration, loss)
            iteration += 1
            losses.append(loss)
            i, u = D.confusion_counts(cache.prediction(), labels)
            inter += i
            union += u
        _, train_miou = D.miou_from_counts(inter, union)
        log.append((epoch, lr, float(np.mean(losses)), train_miou))
        if progress is not None:
            progress(log[-1])
    return backbone, head, log


def format_log(rows):
    lines = [LOG_HEADER]
    lines += [f"{e},{lr:.6f},{loss:.6f},{miou:.4f}" for e, lr, loss, miou in rows]
    return "\n".join(lines) + "\n"
