"""Diversity-aware frame prompting for frozen convolutional encoders."""

__version__ = "0.1.0"
