"""Deterministic simulator of knowledge exchange in peer-to-peer federated learning."""

__version__ = "0.1.0"
