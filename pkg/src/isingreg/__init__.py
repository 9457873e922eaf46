"""Likelihood-guided variational Ising regularization for attention classifiers."""

__version__ = "0.1.0"
