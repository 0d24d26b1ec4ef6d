"""Annealed self-learning Monte Carlo with beta-VAE proposals."""

__version__ = "0.1.0"
