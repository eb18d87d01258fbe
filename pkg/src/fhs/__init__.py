"""Heterogeneous federated learning simulator with client-specific latent generators."""

__version__ = "0.1.0"
