"""Federated loss exploration simulator: guided gradient modulation on top of standard FL aggregators."""

__version__ = "0.1.0"
