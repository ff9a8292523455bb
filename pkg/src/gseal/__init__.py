"""gseal: bit-string watermarking for a 3D Gaussian splat generator."""

__version__ = "0.1.0"
