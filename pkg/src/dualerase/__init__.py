"""Dual erasure adversarial perturbations against multi-view diffusion models."""

__version__ = "0.1.0"
