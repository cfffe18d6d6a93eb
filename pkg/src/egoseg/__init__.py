"""Egocentric hand-object segmentation with hand-guided feature enhancement
and contact-centric object decoupling."""

__version__ = "0.1.0"
