"""High-resolution semantic segmentation at native input resolution.

Six-scale classifier backbone, bottom-up merge head, noisy-student
pseudo-labeling, and a small numpy-backed autodiff core.
"""

from hrseg.tensor import Tensor, backward, grad_check, no_grad, tensor_new

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "tensor_new"]
