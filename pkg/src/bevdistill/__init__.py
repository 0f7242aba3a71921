"""Camera-only 3D detection and tracking with BEV feature distillation, at desk scale."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
