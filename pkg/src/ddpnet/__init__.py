"""Data-dependent path geometry for ReLU networks: complexity measures, DDP-SGD, DDP-Normalization and path-Jacobian analysis."""

__version__ = "0.1.0"
