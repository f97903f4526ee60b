"""Minimal differentiable kernel: tape autodiff, layers, Adam, weight files."""

from . import autodiff
from .autodiff import Tensor, backward, no_graph, parameter, tensor
from .layers import (
    MLP,
    ConvDecoder,
    ConvEncoder,
    Dense,
    DenseTransition,
    LinearDecoder,
    LinearEncoder,
    LowRankTransition,
    Module,
    angular_embed,
    angular_unembed,
    assemble_G2,
    fourier_encode,
    renormalize_angular,
)
from .optim import Adam
from .serialize import load_weights, save_weights

__all__ = [
    "autodiff",
    "Tensor",
    "backward",
    "no_graph",
    "parameter",
    "tensor",
    "MLP",
    "ConvDecoder",
    "ConvEncoder",
    "Dense",
    "DenseTransition",
    "LinearDecoder",
    "LinearEncoder",
    "LowRankTransition",
    "Module",
    "angular_embed",
    "angular_unembed",
    "assemble_G2",
    "fourier_encode",
    "renormalize_angular",
    "Adam",
    "load_weights",
    "save_weights",
]
