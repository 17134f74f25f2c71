"""Binaural sound localization and separation with piecewise-affine cue mappings."""

__version__ = "0.1.0"
