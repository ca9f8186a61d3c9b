"""Desk-scale cross-modal associative pre-training on region features and captions."""

__version__ = "0.1.0"
