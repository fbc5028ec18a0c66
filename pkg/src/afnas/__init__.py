"""Hardware-aware architecture search for a streaming fixed-point AF detector."""

__version__ = "0.1.0"
