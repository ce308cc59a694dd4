"""Target-specific image transforms via a masked variational latent bottleneck."""

__version__ = "0.1.0"
