"""Unsupervised single-view depth and ego-motion from monocular video."""

__version__ = "0.1.0"
