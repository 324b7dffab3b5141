"""Super token attention U-Net built on a small numpy autodiff engine."""

from .model import ModelConfig, StageConfig, StaUNet
from .sta import StaConfig, sta_block
from .tensor import Tensor, no_grad

__all__ = ["ModelConfig", "StageConfig", "StaUNet", "StaConfig", "sta_block", "Tensor", "no_grad"]
__version__ = "0.1.0"
