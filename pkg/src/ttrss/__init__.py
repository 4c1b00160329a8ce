"""Timed-text regularized speech separation on a synthetic tone corpus."""

__version__ = "0.1.0"
