"""Federated learning with frozen-generator synthetic augmentation on a
synthetic multi-domain, class-imbalanced benchmark."""

__version__ = "0.1.0"
