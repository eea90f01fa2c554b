"""Desk-scale lab for information-bottleneck transferable adversarial attacks."""

from ibta_lab.tensor import Tensor, backward, grad_check, load_tensor, save_tensor

__all__ = ["Tensor", "backward", "grad_check", "load_tensor", "save_tensor"]
__version__ = "0.1.0"
