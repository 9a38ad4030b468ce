"""Convolutional vision transformer for county yield regression from satellite histograms."""

__version__ = "0.1.0"
