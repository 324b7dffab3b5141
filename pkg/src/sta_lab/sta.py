"""Super token attention.

Tokens of an ``H×W`` feature map are grouped into a grid of ``h×w`` cells;
each cell owns one super token, initialised as the mean of its tokens. Every
token is softly associated with the super tokens of the 3×3 block of cells
around its own cell (fewer at the borders), super tokens are re-estimated as
association-weighted averages, attend to each other with multi-head
self-attention, and are finally mapped back onto the tokens through the same
association weights.

Internally tokens are kept in "cell layout" ``(B, gh, gw, h*w, C)`` so the
sparse association reduces to small batched matrix products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import LayerNorm, Module, _uniform, depthwise_conv3x3, layer_norm
from .tensor import ShapeError, Tensor, as_tensor, matmul, softmax, where_const

# slot k of a neighbourhood corresponds to offset OFFSETS[k] = (dy, dx)
OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


@dataclass(frozen=True)
class StaConfig:
    channels: int
    token_grid: tuple[int, int]
    heads: int = 1
    iterations: int = 1

    def __post_init__(self):
        h, w = self.token_grid
        if h < 1 or w < 1:
            raise ValueError(f"token grid must be positive, got {self.token_grid}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def grid_extent(self, height: int, width: int) -> tuple[int, int]:
        h, w = self.token_grid
        if height % h or width % w:
            raise ShapeError(f"feature map {height}x{width} is not divisible by token grid {h}x{w}")
        return height // h, width // w


@dataclass
class TokenMatrix:
    """Tokens ``x`` of shape (B, N, C), N = height*width in row-major order."""

    x: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.x.ndim != 3 or self.x.shape[1] != self.height * self.width:
            raise ShapeError(f"token matrix {self.x.shape} does not match {self.height}x{self.width}")

    @classmethod
    def from_feature_map(cls, fm) -> "TokenMatrix":
        fm = as_tensor(fm)
        b, c, h, w = fm.shape
        return cls(fm.transpose(0, 2, 3, 1).reshape(b, h * w, c), h, w)

    def to_feature_map(self) -> Tensor:
        b, _, c = self.x.shape
        return self.x.reshape(b, self.height, self.width, c).transpose(0, 3, 1, 2)


@dataclass
class SuperTokenGrid:
    """Super tokens ``s`` of shape (B, m, C) on a gh×gw grid, m = gh*gw."""

    s: Tensor
    gh: int
    gw: int
    # (B, m) bool: super tokens that received no association weight and kept their previous value
    kept: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.gh * self.gw


@dataclass
class SparseAssociation:
    """Token to super-token association restricted to 3×3 cell neighbourhoods.

    ``weights`` has shape (B, gh, gw, h*w, 9): for every token (grouped by cell,
    row-major inside the cell) the softmax weights over the nine neighbourhood
    slots of :data:`OFFSETS`. ``neighbors[j, k]`` is the super-token index in
    slot k of cell j, or -1 when the slot falls outside the grid; such slots
    carry weight exactly zero.
    """

    weights: Tensor
    neighbors: np.ndarray
    height: int
    width: int
    token_grid: tuple[int, int]
    valid: np.ndarray = field(repr=False, default=None)

    @property
    def grid_extent(self) -> tuple[int, int]:
        return self.height // self.token_grid[0], self.width // self.token_grid[1]

    def token_neighbors(self, i: int) -> tuple[list[int], np.ndarray]:
        """Neighbour super tokens and weights of token ``i`` (row-major index), first batch item."""
        h, w = self.token_grid
        _, gw = self.grid_extent
        r, c = divmod(i, self.width)
        cell = (r // h) * gw + c // w
        local = (r % h) * w + c % w
        nb = self.neighbors[cell]
        keep = nb >= 0
        q = self.weights.data[0].reshape(-1, h * w, 9)[cell, local]
        return nb[keep].tolist(), q[keep]

    def dense(self) -> np.ndarray:
        """Dense (B, N, m) association matrix with zeros outside each neighbourhood."""
        h, w = self.token_grid
        gh, gw = self.grid_extent
        q = self.weights.data
        b = q.shape[0]
        out = np.zeros((b, gh, gw, h * w, gh * gw), dtype=q.dtype)
        for cell in range(gh * gw):
            cy, cx = divmod(cell, gw)
            for k, j in enumerate(self.neighbors[cell]):
                if j >= 0:
                    out[:, cy, cx, :, j] = q[:, cy, cx, :, k]
        return _cells_to_tokens_np(out, self.height, self.width, h, w)


# ---------------------------------------------------------------------------
# layout helpers


def _tokens_to_cells(x: Tensor, height: int, width: int, h: int, w: int) -> Tensor:
    b, _, c = x.shape
    gh, gw = height // h, width // w
    return x.reshape(b, gh, h, gw, w, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh, gw, h * w, c)


def _cells_to_tokens(x: Tensor, height: int, width: int, h: int, w: int) -> Tensor:
    b, gh, gw, _, c = x.shape
    return x.reshape(b, gh, gw, h, w, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, height * width, c)


def _cells_to_tokens_np(x: np.ndarray, height, width, h, w) -> np.ndarray:
    b, gh, gw, _, c = x.shape
    return x.reshape(b, gh, gw, h, w, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, height * width, c)


def neighbor_table(gh: int, gw: int) -> np.ndarray:
    """(m, 9) super-token indices per neighbourhood slot, -1 outside the grid."""
    table = np.full((gh * gw, 9), -1, dtype=np.int64)
    for cy in range(gh):
        for cx in range(gw):
            for k, (dy, dx) in enumerate(OFFSETS):
                y, x = cy + dy, cx + dx
                if 0 <= y < gh and 0 <= x < gw:
                    table[cy * gw + cx, k] = y * gw + x
    return table


def _shift_slices(dy: int, dx: int, gh: int, gw: int):
    return slice(1 + dy, 1 + dy + gh), slice(1 + dx, 1 + dx + gw)


def _gather_np(s: np.ndarray) -> np.ndarray:
    b, gh, gw, c = s.shape
    sp = np.zeros((b, gh + 2, gw + 2, c), dtype=s.dtype)
    sp[:, 1:-1, 1:-1] = s
    out = np.empty((b, gh, gw, 9, c), dtype=s.dtype)
    for k, (dy, dx) in enumerate(OFFSETS):
        ys, xs = _shift_slices(dy, dx, gh, gw)
        out[:, :, :, k] = sp[:, ys, xs]
    return out


def _scatter_np(v: np.ndarray) -> np.ndarray:
    b, gh, gw, _, c = v.shape
    acc = np.zeros((b, gh + 2, gw + 2, c), dtype=v.dtype)
    for k, (dy, dx) in enumerate(OFFSETS):
        ys, xs = _shift_slices(dy, dx, gh, gw)
        acc[:, ys, xs] += v[:, :, :, k]
    return np.ascontiguousarray(acc[:, 1:-1, 1:-1])


def gather_neighbors(s: Tensor) -> Tensor:
    """(B, gh, gw, C) grid → (B, gh, gw, 9, C) neighbourhoods, zero outside the grid."""
    return Tensor._make(_gather_np(s.data), (s,), lambda g: (_scatter_np(g),))


def scatter_neighbors(v: Tensor) -> Tensor:
    """Adjoint of :func:`gather_neighbors`: add slot values back onto their grid cells."""
    return Tensor._make(_scatter_np(v.data), (v,), lambda g: (_gather_np(g),))


# ---------------------------------------------------------------------------
# operations


def cpe(x, weight, bias=None) -> Tensor:
    """Convolutional position embedding: depthwise 3x3 convolution plus identity."""
    x = as_tensor(x)
    return depthwise_conv3x3(x, weight, bias) + x


def init_super_tokens(tokens: TokenMatrix, cfg: StaConfig) -> SuperTokenGrid:
    h, w = cfg.token_grid
    gh, gw = cfg.grid_extent(tokens.height, tokens.width)
    cells = _tokens_to_cells(tokens.x, tokens.height, tokens.width, h, w)
    b, c = cells.shape[0], cells.shape[-1]
    return SuperTokenGrid(cells.mean(axis=3).reshape(b, gh * gw, c), gh, gw)


def associate(tokens: TokenMatrix, grid: SuperTokenGrid, cfg: StaConfig) -> SparseAssociation:
    h, w = cfg.token_grid
    gh, gw = cfg.grid_extent(tokens.height, tokens.width)
    if (gh, gw) != (grid.gh, grid.gw) or tokens.x.shape[-1] != grid.s.shape[-1]:
        raise ShapeError(
            f"tokens {tokens.height}x{tokens.width} with grid {cfg.token_grid} do not match "
            f"super-token grid {grid.gh}x{grid.gw}"
        )
    b, _, c = tokens.x.shape
    cells = _tokens_to_cells(tokens.x, tokens.height, tokens.width, h, w)
    nb = gather_neighbors(grid.s.reshape(b, gh, gw, c))
    logits = matmul(cells, nb.transpose(0, 1, 2, 4, 3)) * (1.0 / math.sqrt(c))
    table = neighbor_table(gh, gw)
    valid = (table >= 0).reshape(1, gh, gw, 1, 9)
    q = softmax(logits, axis=-1, mask=valid)
    return SparseAssociation(q, table, tokens.height, tokens.width, (h, w), valid)


def update_super_tokens(q: SparseAssociation, tokens: TokenMatrix, previous: SuperTokenGrid | None = None) -> SuperTokenGrid:
    """Column-normalised weighted average of tokens per super token.

    A super token with zero total incoming weight keeps its ``previous`` value
    (zero if none is given) and is flagged in ``kept``.
    """
    h, w = q.token_grid
    gh, gw = q.grid_extent
    if (tokens.height, tokens.width) != (q.height, q.width):
        raise ShapeError("association and tokens have different geometry")
    b, _, c = tokens.x.shape
    cells = _tokens_to_cells(tokens.x, tokens.height, tokens.width, h, w)
    numer = scatter_neighbors(matmul(q.weights.transpose(0, 1, 2, 4, 3), cells))
    colsum = scatter_neighbors(q.weights.sum(axis=3).reshape(b, gh, gw, 9, 1))
    empty = colsum.data <= 0
    denom = colsum + empty.astype(colsum.dtype)
    fallback = previous.s.reshape(b, gh, gw, c) if previous is not None else Tensor(np.zeros((b, gh, gw, c), dtype=cells.dtype))
    s = where_const(~empty, numer / denom, fallback)
    return SuperTokenGrid(s.reshape(b, gh * gw, c), gh, gw, kept=empty.reshape(b, gh * gw))


def super_attention(grid: SuperTokenGrid, heads: int, wq, wk, wv) -> SuperTokenGrid:
    """Multi-head self-attention among super tokens, scale sqrt(C / heads), no output projection."""
    s = grid.s
    b, m, c = s.shape
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    def split(t):
        return t.reshape(b, m, heads, d).transpose(0, 2, 1, 3)

    q, k, v = split(matmul(s, wq)), split(matmul(s, wk)), split(matmul(s, wv))
    attn = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)), axis=-1)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, m, c)
    return SuperTokenGrid(out, grid.gh, grid.gw)


def upsample_tokens(q: SparseAssociation, attended: SuperTokenGrid) -> TokenMatrix:
    h, w = q.token_grid
    gh, gw = q.grid_extent
    if (gh, gw) != (attended.gh, attended.gw):
        raise ShapeError(f"association grid {gh}x{gw} vs super tokens {attended.gh}x{attended.gw}")
    b, _, c = attended.s.shape
    nb = gather_neighbors(attended.s.reshape(b, gh, gw, c))
    cells = matmul(q.weights, nb)
    return TokenMatrix(_cells_to_tokens(cells, q.height, q.width, h, w), q.height, q.width)


def super_token_attention(tokens: TokenMatrix, cfg: StaConfig, wq, wk, wv) -> TokenMatrix:
    """Association, update, attention and upsampling for already-normalised tokens."""
    grid = init_super_tokens(tokens, cfg)
    for _ in range(cfg.iterations):
        q = associate(tokens, grid, cfg)
        grid = update_super_tokens(q, tokens, previous=grid)
    return upsample_tokens(q, super_attention(grid, cfg.heads, wq, wk, wv))


def sta_block(x_in, cfg: StaConfig, cpe_weight, cpe_bias, ln_gamma, ln_beta, wq, wk, wv) -> Tensor:
    """CPE residual followed by the normalised super-token attention residual."""
    x = cpe(x_in, cpe_weight, cpe_bias)
    tokens = TokenMatrix.from_feature_map(layer_norm(x, ln_gamma, ln_beta, axis=1))
    y = super_token_attention(tokens, cfg, wq, wk, wv)
    return y.to_feature_map() + x


class StaBlock(Module):
    def __init__(self, cfg: StaConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.channels
        self.cfg = cfg
        self.cpe_weight = _uniform(rng, (c, 1, 3, 3), 9, dtype)
        self.cpe_bias = _uniform(rng, (c,), 9, dtype)
        self.norm = LayerNorm(c, dtype=dtype)
        self.wq = _uniform(rng, (c, c), c, dtype)
        self.wk = _uniform(rng, (c, c), c, dtype)
        self.wv = _uniform(rng, (c, c), c, dtype)

    def forward(self, x):
        return sta_block(x, self.cfg, self.cpe_weight, self.cpe_bias, self.norm.gamma, self.norm.beta,
                         self.wq, self.wk, self.wv)
