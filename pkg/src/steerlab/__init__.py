"""Activation steering of a frozen toy diffusion model, with baselines and an experiment harness."""

__version__ = "0.1.0"
