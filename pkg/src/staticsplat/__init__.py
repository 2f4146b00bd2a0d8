"""Static-background reconstruction of dynamic videos with staticness-weighted Gaussian splatting."""

__version__ = "0.1.0"
