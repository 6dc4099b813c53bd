"""Information-gain driven virtual camera planning for Gaussian splatting scenes."""

__version__ = "0.1.0"
