"""Hierarchical audio-to-gesture synthesis toolkit.

Submodules: pose (skeleton and direction-vector math), autodiff (tensor
engine), nn (layers), model (networks), losses, metrics, audio, data
(corpus I/O and synthetic generation), checkpoint, cli.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
