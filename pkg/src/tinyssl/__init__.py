"""Teacher-guided self-supervised pretraining for sub-megabyte CNNs.

A small reverse-mode autograd engine on numpy drives a MobileNetV2
student, six pretraining objectives, a frozen-teacher feature store and
the parameter and memory arithmetic behind the model budget.
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
