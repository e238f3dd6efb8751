"""Hierarchical regional attention MIL on synthetic slides, on a small numpy autodiff engine."""

__version__ = "0.1.0"
