"""Learned distribution-system state estimation on a from-scratch autodiff core.

A Koopman-style encoder lifts noisy partial measurements, a selective
state-space network generates per-step diagonal filter matrices, a diagonal
Kalman filter tracks the lifted state, and a decoder maps the posterior back to
bus voltage phasors.
"""

from .autograd import Tensor, backward, no_grad
from .model import ModelConfig, MambaDSSE, MambaMixer, build_model

__all__ = ["Tensor", "backward", "no_grad", "ModelConfig", "MambaDSSE", "MambaMixer", "build_model"]
__version__ = "0.1.0"
