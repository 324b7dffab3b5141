"""The U-shaped segmentation network with super token attention stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module, max_pool2x2, relu
from .rng import Rng
from .sta import StaBlock, StaConfig
from .tensor import ShapeError, Tensor, as_tensor, concat, softmax


class StageError(ShapeError):
    """A shape or configuration error raised inside a numbered network stage."""


@dataclass(frozen=True)
class StageConfig:
    num_sta_layers: int
    token_grid: tuple[int, int]
    heads: int

    def __post_init__(self):
        object.__setattr__(self, "token_grid", tuple(self.token_grid))


DEFAULT_STAGES = (
    StageConfig(1, (16, 16), 2),
    StageConfig(2, (8, 8), 4),
    StageConfig(3, (4, 4), 8),
    StageConfig(4, (2, 2), 16),
)


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    num_classes: int = 9
    base_channels: int = 64
    input_size: tuple[int, int] = (224, 224)
    stages: tuple[StageConfig, ...] = field(default=DEFAULT_STAGES)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(
            self, "stages", tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        )
        self._check_structure()

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    def encoder_extent(self, stage: int) -> tuple[int, int]:
        """Spatial extent seen by the STA blocks of encoder stage ``stage`` (after pooling)."""
        h, w = self.input_size
        return h >> stage, w >> stage

    def decoder_extent(self, stage: int) -> tuple[int, int]:
        h, w = self.input_size
        return h >> (stage - 1), w >> (stage - 1)

    def _check_structure(self) -> None:
        if len(self.stages) != 4:
            raise ValueError(f"expected 4 stage configs, got {len(self.stages)}")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input extent {h}x{w} must be divisible by 32")
        for k, st in enumerate(self.stages, start=1):
            c = self.channels(k)
            if c % st.heads:
                raise ValueError(f"stage {k}: {c} channels not divisible by {st.heads} heads")

    def validate(self) -> None:
        """Full check, including token-grid divisibility of every STA stage."""
        self._check_structure()
        for k, st in enumerate(self.stages, start=1):
            for kind, (eh, ew) in (("encoder", self.encoder_extent(k)), ("decoder", self.decoder_extent(k))):
                if eh % st.token_grid[0] or ew % st.token_grid[1]:
                    raise ValueError(
                        f"{kind} stage {k}: extent {eh}x{ew} not divisible by token grid {st.token_grid}"
                    )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["stages"] = [
            {"num_sta_layers": s.num_sta_layers, "token_grid": list(s.token_grid), "heads": s.heads}
            for s in self.stages
        ]
        return d


def _sta_stack(n: int, cfg: StaConfig, rng, dtype) -> list[StaBlock]:
    return [StaBlock(cfg, rng, dtype) for _ in range(n)]


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, stage: StageConfig, rng, dtype):
        self.conv1 = Conv2d(cin, cout, 3, rng, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.blocks = _sta_stack(stage.num_sta_layers, StaConfig(cout, stage.token_grid, stage.heads), rng, dtype)

    def forward(self, x, taps=None, prefix=""):
        skip = relu(self.bn2(self.conv2(self.bn1(self.conv1(x)))))
        out = max_pool2x2(skip)
        for i, blk in enumerate(self.blocks):
            out = blk(out)
            if taps is not None:
                taps[f"{prefix}.sta{i}"] = out
        return out, skip


class Bottleneck(Module):
    def __init__(self, c: int, rng, dtype):
        self.conv1 = Conv2d(c, c, 3, rng, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(c, dtype=dtype)
        self.conv2 = Conv2d(c, c, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(c, dtype=dtype)

    def forward(self, x):
        return relu(self.bn2(self.conv2(self.bn1(self.conv1(x)))))


class DecoderStage(Module):
    """Transposed-conv upsampling, skip concatenation, channel-halving conv, STA blocks."""

    def __init__(self, cin: int, c: int, stage: StageConfig, rng, dtype):
        self.up = ConvTranspose2d(cin, c, 2, rng, stride=2, dtype=dtype)
        self.conv = Conv2d(2 * c, c, 3, rng, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(c, dtype=dtype)
        self.blocks = _sta_stack(stage.num_sta_layers, StaConfig(c, stage.token_grid, stage.heads), rng, dtype)

    def forward(self, x, skip, taps=None, prefix=""):
        up = self.up(x)
        if up.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"upsampled extent {up.shape[2:]} does not match skip extent {skip.shape[2:]}")
        out = relu(self.bn(self.conv(concat([up, skip], axis=1))))
        for i, blk in enumerate(self.blocks):
            out = blk(out)
            if taps is not None:
                taps[f"{prefix}.sta{i}"] = out
        return out


class StaUNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = Rng.derive(seed, 0x5EED).numpy()
        ch = [cfg.channels(k) for k in range(1, 5)]
        self.encoders = [
            EncoderStage(cfg.input_channels if k == 0 else ch[k - 1], ch[k], cfg.stages[k], rng, dtype)
            for k in range(4)
        ]
        self.bottleneck = Bottleneck(ch[3], rng, dtype)
        self.decoders = [
            DecoderStage(ch[3] if k == 3 else ch[k + 1], ch[k], cfg.stages[k], rng, dtype) for k in range(4)
        ]
        self.head = Conv2d(ch[0], cfg.num_classes, 1, rng, dtype=dtype)

    def block_names(self) -> list[str]:
        """STA block names in forward (shallow to deep) order."""
        names = [f"enc{k + 1}.sta{i}" for k in range(4) for i in range(len(self.encoders[k].blocks))]
        names += [f"dec{k + 1}.sta{i}" for k in reversed(range(4)) for i in range(len(self.decoders[k].blocks))]
        return names

    def forward(self, x, taps: dict | None = None) -> Tensor:
        """Per-pixel class probabilities (N, num_classes, H, W).

        When ``taps`` is a dict it is filled with every STA block output keyed by
        :meth:`block_names`.
        """
        x = as_tensor(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected input (N, {self.config.input_channels}, H, W), got {x.shape}")
        skips = []
        for k, enc in enumerate(self.encoders, start=1):
            try:
                x, skip = enc(x, taps, f"enc{k}")
            except ShapeError as e:
                raise StageError(f"encoder stage {k}: {e}") from e
            skips.append(skip)
        x = self.bottleneck(x)
        for k in (4, 3, 2, 1):
            try:
                x = self.decoders[k - 1](x, skips[k - 1], taps, f"dec{k}")
            except ShapeError as e:
                raise StageError(f"decoder stage {k}: {e}") from e
        return softmax(self.head(x), axis=1)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in stable order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = list(params) + list(buffers)
        if sorted(expected) != sorted(state):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {target.shape}")
            target[...] = arr


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count.

    conv KxK cin→cout: cout*cin*K² + cout; batch norm / layer norm: 2c;
    STA block on c channels: 9c + c (CPE) + 2c (norm) + 3c² (q, k, v).
    """
    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def sta(c):
        return 10 * c + 2 * c + 3 * c * c

    total = 0
    for k, st in enumerate(cfg.stages, start=1):
        c = cfg.channels(k)
        cin = cfg.input_channels if k == 1 else cfg.channels(k - 1)
        total += conv(cin, c, 3) + conv(c, c, 3) + 4 * c + st.num_sta_layers * sta(c)
        up_in = cfg.channels(4) if k == 4 else cfg.channels(k + 1)
        total += conv(up_in, c, 2) + conv(2 * c, c, 3) + 2 * c + st.num_sta_layers * sta(c)
    c4 = cfg.channels(4)
    total += 2 * conv(c4, c4, 3) + 4 * c4
    total += conv(cfg.channels(1), cfg.num_classes, 1)
    return total
