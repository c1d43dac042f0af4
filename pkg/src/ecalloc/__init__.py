"""Embedded-compression DRR allocation for hierarchical-B video decoding."""

__version__ = "0.1.0"
TOOL_NAME = "ecalloc"
