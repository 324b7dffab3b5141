"""Analytic FLOPs accounting.

Convention: one multiply-accumulate counts as 2 FLOPs. Only convolutions and
matrix products are counted; normalisation, softmax, activations, pooling,
bias and residual additions are excluded. The same convention is used by the
instrumented counter in :mod:`sta_lab.tensor`, so the two agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import conv_out_extent
from .model import ModelConfig, StageConfig
from .sta import StaConfig
from .tensor import mac_counter, no_grad

CONVENTION = "2 FLOPs per multiply-accumulate; conv + matmul only"


@dataclass
class FlopsRow:
    name: str
    kind: str
    flops: int
    params: int


@dataclass
class FlopsReport:
    rows: list[FlopsRow] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def total(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def add(self, name, kind, flops, params=0) -> None:
        self.rows.append(FlopsRow(name, kind, int(flops), int(params)))

    def to_csv(self) -> str:
        lines = ["name,kind,flops,params"]
        lines += [f"{r.name},{r.kind},{r.flops},{r.params}" for r in self.rows]
        lines.append(f"TOTAL,,{self.total},{self.total_params}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        w = max([len(r.name) for r in self.rows] + [5])
        out = [f"{'layer':<{w}}  {'kind':<14}{'MFLOPs':>14}{'params':>12}"]
        for r in self.rows:
            out.append(f"{r.name:<{w}}  {r.kind:<14}{r.flops / 1e6:>14.3f}{r.params:>12}")
        out.append(f"{'TOTAL':<{w}}  {'':<14}{self.total / 1e6:>14.3f}{self.total_params:>12}")
        out.append(f"({self.convention})")
        return "\n".join(out)


def flops_conv2d(h: int, w: int, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 groups: int = 1) -> int:
    """``2 * K² * Cin/groups * Cout * Hout * Wout``."""
    ho, wo = conv_out_extent(h, k, stride, padding), conv_out_extent(w, k, stride, padding)
    return 2 * k * k * (cin // groups) * cout * ho * wo


def flops_conv_transpose2d(h: int, w: int, cin: int, cout: int, k: int) -> int:
    """``2 * K² * Cin * Cout * H * W`` over the input extent."""
    return 2 * k * k * cin * cout * h * w


def sta_macs(height: int, width: int, cfg: StaConfig) -> dict[str, int]:
    """Multiply-accumulates of one STA block, by component.

    Super-token count uses ceil division so schedules whose cell size does not
    divide the map (treated as padded) can still be costed.
    """
    c = cfg.channels
    n = height * width
    m = math.ceil(height / cfg.token_grid[0]) * math.ceil(width / cfg.token_grid[1])
    return {
        "cpe": 9 * c * n,
        "association": 9 * n * c * cfg.iterations,
        "update": 9 * n * c * cfg.iterations,
        "projections": 3 * m * c * c,
        "attention": 2 * m * m * c,
        "upsample": 9 * n * c,
    }


def flops_sta(height: int, width: int, cfg: StaConfig) -> int:
    return 2 * sum(sta_macs(height, width, cfg).values())


def _conv_params(cin, cout, k, groups=1):
    return cout * (cin // groups) * k * k + cout


def flops_model(cfg: ModelConfig, batch: int = 1, validate: bool = False) -> FlopsReport:
    """Per-layer report for the whole network.

    ``validate=False`` allows token schedules that do not divide the stage
    extents (costed with padded super-token grids).
    """
    if validate:
        cfg.validate()
    rep = FlopsReport()
    h, w = cfg.input_size
    sta_params = lambda c: 12 * c + 3 * c * c  # noqa: E731
    for k, st in enumerate(cfg.stages, start=1):
        c = cfg.channels(k)
        cin = cfg.input_channels if k == 1 else cfg.channels(k - 1)
        rep.add(f"enc{k}.conv1", "conv3x3", batch * flops_conv2d(h, w, cin, c, 3, 1, 1), _conv_params(cin, c, 3) + 2 * c)
        rep.add(f"enc{k}.conv2", "conv3x3", batch * flops_conv2d(h, w, c, c, 3, 1, 1), _conv_params(c, c, 3) + 2 * c)
        h, w = h // 2, w // 2
        scfg = StaConfig(c, st.token_grid, st.heads)
        for i in range(st.num_sta_layers):
            rep.add(f"enc{k}.sta{i}", "sta", batch * flops_sta(h, w, scfg), sta_params(c))
    c4 = cfg.channels(4)
    for j in (1, 2):
        rep.add(f"bottleneck.conv{j}", "conv3x3", batch * flops_conv2d(h, w, c4, c4, 3, 1, 1), _conv_params(c4, c4, 3) + 2 * c4)
    for k in (4, 3, 2, 1):
        st = cfg.stages[k - 1]
        c = cfg.channels(k)
        cin = c4 if k == 4 else cfg.channels(k + 1)
        rep.add(f"dec{k}.up", "convT2x2", batch * flops_conv_transpose2d(h, w, cin, c, 2), _conv_params(cin, c, 2))
        h, w = h * 2, w * 2
        rep.add(f"dec{k}.conv", "conv3x3", batch * flops_conv2d(h, w, 2 * c, c, 3, 1, 1), _conv_params(2 * c, c, 3) + 2 * c)
        scfg = StaConfig(c, st.token_grid, st.heads)
        for i in range(st.num_sta_layers):
            rep.add(f"dec{k}.sta{i}", "sta", batch * flops_sta(h, w, scfg), sta_params(c))
    rep.add("head", "conv1x1", batch * flops_conv2d(h, w, cfg.channels(1), cfg.num_classes, 1),
            _conv_params(cfg.channels(1), cfg.num_classes, 1))
    return rep


def measured_flops(model, x: np.ndarray) -> int:
    """Run one forward pass and return 2 × the multiply-accumulates the kernels executed."""
    with no_grad(), mac_counter() as box:
        model(x)
    return 2 * box[0]


def token_schedule_config(base: ModelConfig, sizes: tuple[int, int, int, int]) -> ModelConfig:
    """``base`` with the per-stage token cell sizes replaced."""
    stages = tuple(StageConfig(st.num_sta_layers, (s, s), st.heads) for st, s in zip(base.stages, sizes))
    return replace(base, stages=stages)
