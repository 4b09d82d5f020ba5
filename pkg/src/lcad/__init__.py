"""Language-guided colorization with latent diffusion on synthetic shape scenes."""

__version__ = "0.1.0"
