"""Simulated sponsored-search market with automated bidding, targeting and ad creation."""

__version__ = "0.1.0"
