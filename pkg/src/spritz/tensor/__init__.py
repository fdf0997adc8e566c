"""Minimal float64 tensor engine with reverse-mode autodiff."""
from . import ops
from .graph import LAYER_KINDS, ModelGraph, OpNode, backward, forward
from .gradcheck import GradCheckReport, grad_check
from .kernels import BACKEND
from .tensor import GraphError, ShapeError, Tensor

__all__ = [
    "BACKEND",
    "GradCheckReport",
    "GraphError",
    "LAYER_KINDS",
    "ModelGraph",
    "OpNode",
    "ShapeError",
    "Tensor",
    "backward",
    "forward",
    "grad_check",
    "ops",
]
