"""Factor-aware latent world model over ordered CT slice sequences."""

__version__ = "0.1.0"
