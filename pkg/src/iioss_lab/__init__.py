"""Numerical toolkit for integral input-output-to-state stability (iIOSS)."""

__version__ = "0.1.0"
