"""Random-frequency quantum harmonic oscillator toolkit."""

__version__ = "0.1.0"
