"""Temporal feature fusion for video object detection, at desk scale."""
__version__ = "0.1.0"
