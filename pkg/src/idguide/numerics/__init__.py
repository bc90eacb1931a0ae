from . import tensor as T
from .adam import Adam, AdamState, adam_step
from .rng import SeededRng, gaussian_sample
from .tensor import Tape, Tensor, backprop, tensor_stats

__all__ = [
    "Adam", "AdamState", "SeededRng", "T", "Tape", "Tensor",
    "adam_step", "backprop", "gaussian_sample", "tensor_stats",
]
