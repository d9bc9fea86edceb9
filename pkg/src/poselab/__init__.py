"""Cross-category gradient contention lab on a synthetic 9DoF pose task."""

__version__ = "0.1.0"
