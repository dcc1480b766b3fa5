"""Sinusoidal, isotropic and anisotropic Fourier positional encodings, with
the shape-regression benchmark used to compare them."""

__version__ = "0.1.0"
