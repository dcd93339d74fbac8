"""Learnable normalized-convolution imputation and multi-resolution
temporal convolutional disease-onset prediction for sparse lab series."""

__version__ = "0.1.0"
