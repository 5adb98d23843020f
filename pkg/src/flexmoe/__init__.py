"""Federated fine-tuning of Mixture-of-Experts transformers with per-client side experts."""

__version__ = "0.1.0"
