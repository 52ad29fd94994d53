"""Diffusion recommenders with autoguidance and item-side fairness evaluation."""

__version__ = "0.1.0"
