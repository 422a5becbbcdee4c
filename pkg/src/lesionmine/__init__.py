"""Self-training orchestration for universal lesion detection and tagging."""

__version__ = "0.1.0"
