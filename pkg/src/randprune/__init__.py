"""Random channel pruning: search, criteria and reconstruction on a numpy CNN core."""

__version__ = "0.1.0"
