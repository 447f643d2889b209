"""Trainable sparse image matching with guidance-pruned, position-guided attention."""

__version__ = "0.1.0"
