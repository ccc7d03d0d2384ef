"""Physical-image analysis for porous media."""

__version__ = "0.1.0"
