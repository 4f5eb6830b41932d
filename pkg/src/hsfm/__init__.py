"""Hierarchical structure-and-motion from unordered image correspondences."""

__version__ = "0.1.0"
