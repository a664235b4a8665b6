"""Goodness-of-fit tests for the functional form of linear mixed models."""

__version__ = "0.1.0"
