"""Toy-scale supervised training on synthetic shape images."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, InputError, TrainingDivergence
from .tensor import softmax

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond")


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    labels: np.ndarray  # (N,) int64
    seed: int
    classes: int
    shapes: tuple[str, ...]

    def __len__(self):
        return len(self.labels)


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "triangle":
        # equilateral, circumradius r
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = angle + 2 * math.pi * k / 3
            nx, ny = math.cos(a), math.sin(a)
            inside &= (nx * dx + ny * dy) <= 0.5 * r
        return inside
    if kind == "cross":
        return ((np.abs(u) <= 0.3 * r) & (np.abs(v) <= r)) | ((np.abs(v) <= 0.3 * r) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    raise ConfigError(f"unknown shape {kind!r}")


def gen_dataset(seed: int, n: int, classes: int = 3, resolution: int = 64) -> SyntheticDataset:
    """One shape per image at random position, scale and rotation on a textured background.

    Labels cycle through the classes before a seeded shuffle, so each class
    gets ``n // classes`` or one more images.
    """
    if not 2 <= classes <= len(SHAPES):
        raise ConfigError(f"classes must lie in [2, {len(SHAPES)}], got {classes}")
    if n < 1 or resolution < 8:
        raise ConfigError(f"need n >= 1 and resolution >= 8, got n={n}, resolution={resolution}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    R = resolution
    yy, xx = np.mgrid[0:R, 0:R].astype(np.float64) + 0.5
    images = np.empty((n, R, R, 3), dtype=np.float64)
    for i, lab in enumerate(labels):
        # background: dim oriented stripes plus pixel noise
        base = rng.uniform(0.15, 0.45, size=3)
        freq = rng.uniform(0.05, 0.25)
        theta = rng.uniform(0, math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        stripes = np.sin(freq * (math.cos(theta) * xx + math.sin(theta) * yy) + phase)
        img = base + 0.08 * stripes[..., None] + rng.normal(0, 0.03, size=(R, R, 3))
        r = rng.uniform(0.18, 0.32) * R
        cy, cx = rng.uniform(r, R - r, size=2)
        mask = _shape_mask(SHAPES[lab], yy, xx, cy, cx, r, rng.uniform(0, 2 * math.pi))
        # bright foreground so the silhouette, not the colour, carries the label
        fg = rng.uniform(0.7, 1.0, size=3)
        img[mask] = fg + rng.normal(0, 0.03, size=(int(mask.sum()), 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return SyntheticDataset(images=images, labels=labels, seed=seed, classes=classes,
                            shapes=SHAPES[:classes])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 32
    label_smoothing: float = 0.1
    grad_clip_norm: float = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_lr_ratio: float = 0.01
    hflip: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.label_smoothing < 0:
            raise ConfigError("lr, weight_decay and label_smoothing must be non-negative")
        if self.total_steps < 1 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ConfigError("total_steps and batch_size must be positive, warmup_steps non-negative")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        out = {}
        for k, v in kv.items():
            if k not in types:
                raise ConfigError(f"unknown train config key {k!r}")
            t = types[k]
            out[k] = v.strip().lower() in ("1", "true", "yes") if t is bool else t(v)
        return cls(**out)


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``lr * min_lr_ratio``; steps start at 1."""
    if config.warmup_steps and step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = max(config.total_steps - config.warmup_steps, 1)
    t = min(max(step - config.warmup_steps, 0) / span, 1.0)
    lo = config.lr * config.min_lr_ratio
    return lo + 0.5 * (config.lr - lo) * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()})


def adamw_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, step: int,
               lr: float | None = None) -> float:
    """One AdamW update in place; returns the learning rate used.

    Gradients are clipped to ``config.grad_clip_norm`` first. Weight decay is
    decoupled: ``p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if step < 1:
        raise ConfigError(f"step counts from 1, got {step}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for parameter {name!r} at step {step}")
    clip_grad_norm(grads, config.grad_clip_norm)
    lr = lr_at(config, step) if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    decay = 1.0 - lr * config.weight_decay
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        p *= decay
        p -= lr * update
    return lr


# ---------------------------------------------------------------------------
# loop


def predict_logits(model, images, batch_size: int = 64) -> np.ndarray:
    outs = [model.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model, dataset: SyntheticDataset, batch_size: int = 64) -> float:
    logits = predict_logits(model, dataset.images, batch_size)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def train(model, dataset: SyntheticDataset, config: TrainConfig, eval_dataset=None,
          log_path=None, eval_every: int | None = None):
    """Train ``model`` in place; returns ``(model, rows)`` with one metric row per epoch.

    Each row has ``step, lr, loss, train_acc, eval_acc`` where the loss and
    accuracy are running means over the epoch's (augmented) batches.
    """
    N = len(dataset)
    if N == 0:
        raise InputError("empty dataset")
    model.check_input(dataset.images[:1])
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(model.params)
    steps_per_epoch = max(1, math.ceil(N / config.batch_size))
    rows = []
    step = 0
    loss_sum = correct = seen = 0.0
    lr = 0.0
    perm = rng.permutation(N)
    pos = 0
    while step < config.total_steps:
        if pos >= N:
            perm, pos = rng.permutation(N), 0
        idx = perm[pos:pos + config.batch_size]
        pos += config.batch_size
        x = dataset.images[idx]
        y = dataset.labels[idx]
        if config.hflip:
            flip = rng.random(len(idx)) < 0.5
            x = np.where(flip[:, None, None, None], x[:, :, ::-1, :], x)
        step += 1
        loss, grads, logits = model.loss_and_grads(x, y, config.label_smoothing, train=True, rng=rng)
        if not math.isfinite(loss):
            raise TrainingDivergence(f"loss became non-finite at step {step}")
        lr = adamw_step(model.params, grads, state, config, step)
        loss_sum += loss * len(idx)
        correct += float((logits.argmax(axis=1) == y).sum())
        seen += len(idx)
        period = eval_every or steps_per_epoch
        if step % period == 0 or step == config.total_steps:
            row = {"step": step, "lr": lr, "loss": loss_sum / seen, "train_acc": correct / seen,
                   "eval_acc": evaluate(model, eval_dataset) if eval_dataset is not None else float("nan")}
            rows.append(row)
            log.info("step %d lr %.2e loss %.4f train_acc %.3f eval_acc %.3f", step, lr,
                     row["loss"], row["train_acc"], row["eval_acc"])
            loss_sum = correct = seen = 0.0
    if log_path is not None:
        write_metrics(rows, log_path)
    return model, rows


def write_metrics(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "train_acc", "eval_acc"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def predict_proba(model, images, batch_size: int = 64) -> np.ndarray:
    return softmax(predict_logits(model, images, batch_size))
