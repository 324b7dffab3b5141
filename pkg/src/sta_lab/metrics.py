"""Segmentation metrics: Dice similarity coefficient and intersection over union."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import no_grad


@dataclass
class ClassScores:
    per_class: np.ndarray  # (K,)
    classes: tuple[int, ...]

    @property
    def mean(self) -> float:
        return float(self.per_class.mean()) if len(self.per_class) else float("nan")


def _counts(pred: np.ndarray, gt: np.ndarray, k: int):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} extents differ")
    inter = np.empty(k)
    psize = np.empty(k)
    gsize = np.empty(k)
    for c in range(k):
        p, g = pred == c, gt == c
        inter[c] = np.count_nonzero(p & g)
        psize[c] = np.count_nonzero(p)
        gsize[c] = np.count_nonzero(g)
    return inter, psize, gsize


def _classes(k: int, exclude) -> tuple[int, ...]:
    exclude = set(exclude or ())
    return tuple(c for c in range(k) if c not in exclude)


def dice_score(pred, gt, k: int, exclude=()) -> ClassScores:
    """Per-class ``2|P∩G| / (|P| + |G|)``; a class absent from both scores 1."""
    inter, ps, gs = _counts(pred, gt, k)
    denom = ps + gs
    dsc = np.where(denom > 0, 2 * inter / np.maximum(denom, 1), 1.0)
    cls = _classes(k, exclude)
    return ClassScores(dsc[list(cls)], cls)


def iou_score(pred, gt, k: int, exclude=()) -> ClassScores:
    """Per-class ``|P∩G| / |P∪G|``; a class absent from both scores 1."""
    inter, ps, gs = _counts(pred, gt, k)
    union = ps + gs - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    cls = _classes(k, exclude)
    return ClassScores(iou[list(cls)], cls)


def predict(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Arg-max labels (N, H, W) in inference mode (frozen batch-norm statistics)."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            probs = model(images[start : start + batch_size].astype(model.dtype))
            out.append(probs.data.argmax(axis=1))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


@dataclass
class EvalResult:
    case_names: list[str]
    dsc: np.ndarray  # (cases, classes)
    iou: np.ndarray
    classes: tuple[int, ...]

    @property
    def mean_dsc(self) -> float:
        return float(self.dsc.mean())

    @property
    def mean_iou(self) -> float:
        return float(self.iou.mean())


def evaluate(model, images: np.ndarray, masks: np.ndarray, k: int, names=None, exclude=()) -> EvalResult:
    """Per-case, per-class scores; means are over cases then classes."""
    if len(images) == 0:
        raise ValueError("nothing to evaluate")
    preds = predict(model, images)
    dsc, iou = [], []
    for p, g in zip(preds, masks):
        d = dice_score(p, g, k, exclude)
        dsc.append(d.per_class)
        iou.append(iou_score(p, g, k, exclude).per_class)
    names = list(names) if names is not None else [f"case{i:04d}" for i in range(len(images))]
    return EvalResult(names, np.array(dsc), np.array(iou), d.classes)
