"""Lung segmentation on CT: preprocessing, U-net, post-processing and evaluation."""

__version__ = "0.1.0"
