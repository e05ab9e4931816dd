"""Unsupervised learning of depth and the depth-of-field effect from
single-DoF image collections, built around a differentiable light-field
aperture renderer on top of an adversarial generator."""

__version__ = "0.1.0"

from . import apps, fileio, lfrender, metrics, models, objectives, synthdata, trainer

__all__ = [
    "apps",
    "fileio",
    "lfrender",
    "metrics",
    "models",
    "objectives",
    "synthdata",
    "trainer",
    "__version__",
]
