"""Neural architecture search with Bayesian optimisation and optimal transport."""

__version__ = "0.1.0"
