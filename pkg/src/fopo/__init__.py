"""Foresight policy optimization (FoPO) and baselines for two-player dialogue games."""

__version__ = "0.1.0"
