"""Discrete potential theory, random interlacements and confined walks on Z^d."""
__version__ = "0.1.0"
