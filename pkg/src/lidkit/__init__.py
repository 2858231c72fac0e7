"""Desk-scale i-vector language recognition with GMM-UBM or DNN-UBM statistics."""

__version__ = "0.1.0"
