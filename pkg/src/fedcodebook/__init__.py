"""Federated codebook learning on text-attributed graphs, at desk scale."""

from .tensor import Tensor, backward, stop_gradient, straight_through

__all__ = ["Tensor", "backward", "stop_gradient", "straight_through"]

__version__ = "0.1.0"
