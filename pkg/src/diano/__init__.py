"""Autoencoding neural operators with differentiable PDE solvers in the
latent space, on uniform structured grids."""

from . import autodiff, fdm, pde, layers, models, training, datagen, snapio

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "fdm",
    "pde",
    "layers",
    "models",
    "training",
    "datagen",
    "snapio",
    "__version__",
]
