"""Curvature-guided dynamic-scale multi-view stereo at desk scale."""

__version__ = "0.1.0"
