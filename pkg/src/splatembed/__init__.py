"""Loss-free language embedding of Gaussian-splatting scenes."""

__version__ = "0.1.0"
