"""Fit smooth manifolds to noisy samples by descending to the ridge of an
approximate squared distance function (asdf)."""

__version__ = "0.1.0"
