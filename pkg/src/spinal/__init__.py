"""Hierarchical modulated locomotion controllers on a planar swimmer."""

__version__ = "0.1.0"
