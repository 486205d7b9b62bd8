"""Primary JPEG quantization matrix estimation from double-compressed patches."""

__version__ = "0.1.0"
