"""Path counting, size-biased spines and threshold bounds for oriented percolation."""

__version__ = "0.1.0"
