"""Chunked 3D scene generation: voxel preprocessing, a chunk VAE, and latent outpainting."""

__version__ = "0.1.0"
