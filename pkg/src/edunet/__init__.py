"""Dual-branch edge-guided OCT fluid segmentation on a small numpy autodiff core."""

__version__ = "0.1.0"
