"""Regularized DeepIV: two-stage Tikhonov-regularized nonparametric IV regression."""
__version__ = "0.1.0"
