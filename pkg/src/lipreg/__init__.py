"""Lipschitz regularization toolkit: adversarial and gradient penalties,
spectral normalization, small training harnesses, and brute-force
verification oracles."""

from .tape import Tensor, Tape, Rng, grad

__all__ = ["Tensor", "Tape", "Rng", "grad"]
