"""Texture-fusion thyroid nodule classifiers on a small numpy autodiff engine."""

__version__ = "0.1.0"
