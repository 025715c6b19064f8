"""Axial-shift MLP instance segmentation with point refinement and edge guidance loss."""

__version__ = "0.1.0"
