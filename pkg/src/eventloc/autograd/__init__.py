from . import ops
from .checkpoint import CheckpointError, load_weights, save_weights
from .nn import Initializer, ModelWeights, conv, conv_gru_step
from .optim import AdamState, adam_step, clip_grad_norm, onecycle_lr
from .tensor import ShapeError, Tensor, as_tensor, default_dtype, no_grad, precision, set_default_dtype

__all__ = [
    "ops", "Tensor", "ShapeError", "as_tensor", "default_dtype", "set_default_dtype", "precision", "no_grad",
    "ModelWeights", "Initializer", "conv", "conv_gru_step", "AdamState", "adam_step", "clip_grad_norm", "onecycle_lr",
    "save_weights", "load_weights", "CheckpointError",
]
