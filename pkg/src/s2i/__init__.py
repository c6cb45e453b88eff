"""Spike-train to image decoding with a from-scratch numpy autodiff engine."""

__version__ = "0.1.0"
