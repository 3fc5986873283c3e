"""Pluggable-loss training and evaluation harness for image colorization."""

__version__ = "0.1.0"
