"""Latent-prediction solver for procedurally generated sequential RPM tests."""

__version__ = "0.1.0"
