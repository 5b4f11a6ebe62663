"""Multistage lumbar spinal canal stenosis grading with multi-view cross attention."""

__version__ = "0.1.0"
