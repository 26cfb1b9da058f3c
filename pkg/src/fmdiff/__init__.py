"""Conditional diffusion through differentiable forward models, at desk scale."""

from . import denoiser, diffusion, forward_models, measures, schedule, tensor, testbeds
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "denoiser", "diffusion", "forward_models", "measures", "schedule", "tensor", "testbeds"]
