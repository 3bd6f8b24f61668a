"""Adversarial training lab: flow-transported importance sampling of
generator noise, with baseline comparison and proxy Frechet tracking."""

__version__ = "0.1.0"
