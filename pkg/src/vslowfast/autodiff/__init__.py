"""A small reverse-mode differentiation engine over float64 numpy arrays."""
from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import ShapeError, Tensor, backward

__all__ = [
    "BatchNorm2d", "CheckpointError", "Conv2d", "ConvTranspose2d", "Module", "ShapeError",
    "Tensor", "backward", "check_gradients", "load_checkpoint", "ops", "save_checkpoint",
]
