"""Sparse-voxel Gaussian latents, a latent diffusion bridge, and a CPU splatting renderer."""

__version__ = "0.1.0"
