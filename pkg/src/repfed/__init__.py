"""Multimodal federated learning simulator that aggregates public-data representations."""

__version__ = "0.1.0"
