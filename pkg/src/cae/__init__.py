"""Compressive autoencoder image codec at desk scale."""

__version__ = "0.1.0"
