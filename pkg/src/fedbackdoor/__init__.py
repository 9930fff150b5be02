"""Deterministic desk-scale federated-learning backdoor attack and defense simulator."""

__version__ = "0.1.0"
