"""Maximum-likelihood inference for Gaussian mixtures with auxiliary variables."""

__version__ = "0.1.0"
