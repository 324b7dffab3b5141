"""Training regime: SGD with momentum, poly or cosine learning-rate decay,
0.4·CE + 0.6·Dice loss and flip/rotation augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import Module
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

CE_LOG_FLOOR = 1e-12
METRICS_HEADER = ("epoch", "iter", "lr", "loss", "ce", "dice_loss")


class TrainingDiverged(RuntimeError):
    def __init__(self, batch_index: int, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at batch {batch_index} (epoch {epoch})")
        self.batch_index = batch_index
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 1e-2
    schedule: str = "poly"
    epochs: int = 300
    max_iterations: int | None = None
    batch_size: int = 8
    w_ce: float = 0.4
    w_dice: float = 0.6
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    aug_probability: float = 0.5
    dice_epsilon: float = 1e-5
    poly_per_epoch: bool = False

    def __post_init__(self):
        if abs(self.w_ce + self.w_dice - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {self.w_ce} + {self.w_dice}")
        if not self.lr_initial > 0:
            raise ValueError("lr_initial must be positive")
        if not 0.0 <= self.aug_probability <= 1.0:
            raise ValueError("aug_probability must lie in [0, 1]")
        if self.schedule not in ("poly", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


# ---------------------------------------------------------------------------
# schedules


def poly_lr(lr_initial: float, t: int, n: int, power: float = 0.9) -> float:
    """``lr_initial * (1 - t/n) ** power``."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= t <= n:
        raise ValueError(f"iteration {t} outside [0, {n}]")
    return lr_initial * (1.0 - t / n) ** power


def cosine_lr(lr_initial: float, t: int, n: int, lr_min: float = 0.0) -> float:
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= t <= n:
        raise ValueError(f"iteration {t} outside [0, {n}]")
    if t == n:
        return lr_min
    return lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + math.cos(math.pi * t / n))


# ---------------------------------------------------------------------------
# losses


def one_hot(target: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels → (N, K, H, W) indicator array."""
    target = np.asarray(target)
    if target.min(initial=0) < 0 or target.max(initial=0) >= k:
        raise ValueError(f"class index outside [0, {k})")
    return (target[:, None] == np.arange(k).reshape(1, k, 1, 1)).astype(dtype)


def cross_entropy(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log p[target]``, log argument floored at 1e-12."""
    g = one_hot(target, probs.shape[1], probs.dtype)
    picked = (probs * g).sum(axis=1)
    return -picked.clamp_min(CE_LOG_FLOOR).log().mean()


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Soft Dice loss averaged uniformly over all classes (background included)."""
    g = one_hot(target, probs.shape[1], probs.dtype)
    axes = (0, 2, 3)
    inter = (probs * g).sum(axis=axes)
    denom = probs.sum(axis=axes) + g.sum(axis=axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - dice.mean()


def composite_loss(probs: Tensor, target: np.ndarray, w_ce: float = 0.4, w_dice: float = 0.6,
                   eps: float = 1e-5) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, ce, dice)."""
    ce = cross_entropy(probs, target)
    dl = dice_loss(probs, target, eps)
    return ce * w_ce + dl * w_dice, ce, dl


# ---------------------------------------------------------------------------
# augmentation


def augment(image: np.ndarray, mask: np.ndarray, rng: Rng, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip and random rotation by 90/180/270 degrees.

    Both decisions are drawn every call so the stream position does not depend
    on the outcome. ``image`` is (..., H, W); ``mask`` is (H, W).
    """
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"image {image.shape} and mask {mask.shape} extents differ")
    flip = rng.random() < p
    rotate = rng.random() < p
    k = 1 + rng.randbelow(3)
    if flip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if rotate:
        image, mask = np.rot90(image, k, axes=(-2, -1)), np.rot90(mask, k, axes=(-2, -1))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocities: Sequence[np.ndarray],
             lr: float, momentum: float, weight_decay: float) -> None:
    """In place: ``v = momentum*v + grad + weight_decay*param``; ``param -= lr*v``."""
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"sgd shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step([p.data for p in self.params], grads, self.velocity, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    epochs: int = 0
    final_metrics: dict | None = None


def _schedule(cfg: TrainConfig, it: int, it_in_epoch: int, total: int, per_epoch: int) -> float:
    if cfg.schedule == "cosine":
        return cosine_lr(cfg.lr_initial, it, total)
    if cfg.poly_per_epoch:
        return poly_lr(cfg.lr_initial, it_in_epoch, per_epoch)
    return poly_lr(cfg.lr_initial, it, total)


def train(model: Module, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
          metrics_csv: str | Path | None = None) -> TrainReport:
    """Train ``model`` in place on (N, C, H, W) images and (N, H, W) masks.

    The iteration counter advances per batch and drives the schedule. With
    ``max_iterations`` set, training stops after that many batches and the
    schedule spans exactly those iterations; otherwise it spans
    ``epochs * ceil(N / batch_size)``.
    """
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    if len(masks) != n:
        raise ValueError("images and masks differ in count")
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_iterations if cfg.max_iterations is not None else cfg.epochs * per_epoch
    dtype = getattr(model, "dtype", np.float32)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    report = TrainReport()
    model.train()

    rows = []
    it = 0
    epoch = 0
    while it < total:
        order = list(range(n))
        Rng.derive(cfg.seed, epoch, 0xD1CE).shuffle(order)
        epoch_losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            if it >= total:
                break
            idx = order[start : start + cfg.batch_size]
            xb, yb = [], []
            for i in idx:
                img, msk = augment(images[i], masks[i], Rng.derive(cfg.seed, epoch, i), cfg.aug_probability)
                xb.append(img)
                yb.append(msk)
            x = np.stack(xb).astype(dtype)
            y = np.stack(yb)

            lr = _schedule(cfg, it, b, total, per_epoch)
            opt.zero_grad()
            probs = model(x)
            loss, ce, dl = composite_loss(probs, y, cfg.w_ce, cfg.w_dice, cfg.dice_epsilon)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(it, epoch, value)
            loss.backward()
            opt.step(lr)

            rows.append((epoch, it, lr, value, ce.item(), dl.item()))
            report.lr_trace.append(lr)
            report.loss_trace.append(value)
            epoch_losses.append(value)
            it += 1
        report.epoch_loss.append(float(np.mean(epoch_losses)))
        log.info("epoch %d: mean loss %.5f, lr %.3g", epoch, report.epoch_loss[-1], report.lr_trace[-1])
        epoch += 1
    report.iterations = it
    report.epochs = epoch
    if metrics_csv is not None:
        write_metrics_csv(metrics_csv, rows)
    return report


def write_metrics_csv(path: str | Path, rows) -> None:
    from .io import atomic_write_text

    lines = [",".join(METRICS_HEADER)]
    for epoch, it, lr, loss, ce, dl in rows:
        lines.append(f"{epoch},{it},{lr!r},{loss!r},{ce!r},{dl!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
