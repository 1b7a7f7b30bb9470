"""Unified pixel-level OCR: text removal, text segmentation and tampered-text
detection as prompted RGB-to-RGB translation."""

__version__ = "0.1.0"
