"""Minimal float64 tensor library with reverse-mode automatic differentiation."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (MLP, CrossAttention, GRUCell, Linear, Module, cross_attention, gru_cell,
                     masked_softmax)
from .optim import Adam
from .tensor import (AutodiffError, Graph, Tensor, backward, graph_of, no_grad)
from . import tensor as ops

__all__ = [
    "Adam", "AutodiffError", "CheckpointError", "CrossAttention", "GRUCell", "Graph", "Linear",
    "MLP", "Module", "Tensor", "backward", "cross_attention", "graph_of", "gru_cell",
    "load_checkpoint", "masked_softmax", "no_grad", "ops", "save_checkpoint",
]
