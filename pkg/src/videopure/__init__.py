"""Diffusion-based adversarial purification for video classifiers.

The package provides synthetic motion-classification video data, a small
frame diffusion model with DDIM/DDPM samplers and temporal inversion, guided
purification with multi-step voting, baseline input-transformation defenses,
white-box and adaptive attacks, and an evaluation harness with a CLI.
"""

__version__ = "0.1.0"
