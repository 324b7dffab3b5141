"""Block-wise representation similarity with RBF-kernel centered kernel alignment."""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import Rng
from .tensor import no_grad

log = logging.getLogger(__name__)


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances by direct differencing (zero for coinciding rows)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    d2 = np.empty((n, n))
    for i in range(n):
        diff = x - x[i]
        d2[i] = np.einsum("ij,ij->i", diff, diff)
    return np.minimum(d2, d2.T)


def median_bandwidth(d2: np.ndarray) -> float:
    off = d2[~np.eye(len(d2), dtype=bool)]
    med = float(np.median(off)) if off.size else 0.0
    return med if med > 0 else 1.0


def rbf_gram(x: np.ndarray, bandwidth: float | str | None = None) -> np.ndarray:
    """``K_ij = exp(-||x_i - x_j||² / bandwidth)``.

    ``bandwidth`` defaults to 1 (the plain unit-bandwidth kernel). ``"median"``
    uses the median off-diagonal squared distance, which keeps the kernel from
    collapsing to the identity on large-magnitude activations.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(len(x), -1)
    if x.shape[0] < 2:
        raise ValueError("rbf_gram needs at least two samples")
    d2 = pairwise_sq_dists(x)
    if bandwidth is None:
        bw = 1.0
    elif bandwidth == "median":
        bw = median_bandwidth(d2)
    else:
        bw = float(bandwidth)
    return np.exp(-d2 / bw)


def center_gram(k: np.ndarray) -> np.ndarray:
    """``H K H`` with ``H = I - 11ᵀ/n``."""
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def _cka_centered(kc: np.ndarray, lc: np.ndarray) -> float:
    num = float(np.sum(kc * lc))
    den = float(np.sum(kc * kc)) * float(np.sum(lc * lc))
    if den <= 0.0:
        warnings.warn("CKA of a constant representation is undefined; returning 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return num / np.sqrt(den)


def cka(x: np.ndarray, y: np.ndarray, bandwidth: float | str | None = None) -> float:
    """``tr(KHLH) / sqrt(tr(KHKH) tr(LHLH))`` with RBF Gram matrices K and L."""
    x, y = np.asarray(x), np.asarray(y)
    if len(x) != len(y):
        raise ValueError(f"sample counts differ: {len(x)} vs {len(y)}")
    return _cka_centered(center_gram(rbf_gram(x, bandwidth)), center_gram(rbf_gram(y, bandwidth)))


@dataclass
class ActivationDump:
    names: list[str]
    blocks: list[np.ndarray]  # each (n_samples, n_features), float

    def __post_init__(self):
        if len(self.names) != len(self.blocks):
            raise ValueError("names and blocks differ in length")
        counts = {b.shape[0] for b in self.blocks}
        if len(counts) > 1:
            raise ValueError(f"blocks disagree on sample count: {sorted(counts)}")

    @property
    def n_samples(self) -> int:
        return self.blocks[0].shape[0] if self.blocks else 0


@dataclass
class CkaMatrix:
    names: list[str]
    values: np.ndarray
    normalized: bool = False

    def min_max(self) -> "CkaMatrix":
        lo, hi = float(self.values.min()), float(self.values.max())
        if hi - lo <= 0:
            warnings.warn("CKA matrix is constant; min-max normalisation yields zeros", RuntimeWarning, stacklevel=2)
            return CkaMatrix(self.names, np.zeros_like(self.values), True)
        return CkaMatrix(self.names, (self.values - lo) / (hi - lo), True)


def block_similarity(dump: ActivationDump, normalize: bool = False,
                     bandwidth: float | str | None = None) -> CkaMatrix:
    """CKA between every pair of blocks, optionally min-max normalised to [0, 1]."""
    if len(dump.blocks) < 2:
        raise ValueError("block similarity needs at least two blocks")
    grams = [center_gram(rbf_gram(b, bandwidth)) for b in dump.blocks]
    nb = len(grams)
    vals = np.empty((nb, nb))
    for a in range(nb):
        for b in range(a, nb):
            vals[a, b] = vals[b, a] = _cka_centered(grams[a], grams[b])
    mat = CkaMatrix(list(dump.names), vals)
    return mat.min_max() if normalize else mat


def redundancy_summary(mat: CkaMatrix) -> dict[str, float]:
    """Mean off-diagonal similarity within the shallow half and within the deep half of the blocks."""
    v = mat.values
    half = len(v) // 2

    def mean_off(sub):
        n = len(sub)
        if n < 2:
            return float("nan")
        return float((sub.sum() - np.trace(sub)) / (n * n - n))

    return {"shallow_mean_offdiag": mean_off(v[:half, :half]), "deep_mean_offdiag": mean_off(v[half:, half:])}


def capture_activations(model, images: np.ndarray, selector: Sequence[str] | None = None,
                        max_features: int | None = None, seed: int = 0, batch_size: int = 16) -> ActivationDump:
    """Flattened STA block outputs for ``images``, in the order given by ``selector``.

    ``selector`` defaults to every block in forward order. When ``max_features``
    caps the width, the kept feature columns depend only on (seed, block name).
    """
    available = model.block_names()
    names = list(available if selector is None else selector)
    if not names:
        raise ValueError("empty block selection")
    unknown = [n for n in names if n not in available]
    if unknown:
        raise KeyError(f"unknown blocks {unknown}; available: {available}")
    wanted = set(names)
    chunks: dict[str, list[np.ndarray]] = {n: [] for n in wanted}
    was_training = model.training
    model.eval()
    with no_grad():
        for start in range(0, len(images), batch_size):
            taps: dict = {}
            model(images[start : start + batch_size].astype(model.dtype), taps=taps)
            for n in wanted:
                t = taps[n].data
                chunks[n].append(t.reshape(t.shape[0], -1).copy())
    model.train(was_training)

    blocks = {}
    for n in wanted:
        mat = np.concatenate(chunks[n])
        if max_features is not None and mat.shape[1] > max_features:
            gen = Rng.derive(seed, zlib.crc32(n.encode())).numpy()
            cols = np.sort(gen.choice(mat.shape[1], size=max_features, replace=False))
            mat = mat[:, cols]
        blocks[n] = mat
    return ActivationDump(names, [blocks[n] for n in names])
