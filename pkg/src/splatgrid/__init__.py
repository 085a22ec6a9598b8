"""Differentiable splat-grid engine: cameras, rasterizer, losses, fitting, latents, diffusion."""

__version__ = "0.1.0"
