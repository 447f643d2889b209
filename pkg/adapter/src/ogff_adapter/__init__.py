"""Bridge from real images to OGFF feature files."""

__version__ = "0.1.0"
