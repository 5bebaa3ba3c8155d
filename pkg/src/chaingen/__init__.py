"""Chemistry-conditioned latent flow-matching generation of periodic polymer chain structures."""

__version__ = "0.1.0"
