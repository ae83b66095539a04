"""Weight-space m-of-n backdoor toolkit for small numpy Vision Transformers."""

from .checkpoint import Checkpoint, ViTConfig, load, save
from .injector import InjectionPlan, default_plan, inject
from .vit import forward, new_model, predict

__all__ = [
    "Checkpoint",
    "ViTConfig",
    "InjectionPlan",
    "default_plan",
    "forward",
    "inject",
    "load",
    "new_model",
    "predict",
    "save",
]
__version__ = "0.1.0"
