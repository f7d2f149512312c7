"""Exact dephasing dynamics, spectroscopy, and oracles for multiqubit Gaussian noise."""

__version__ = "0.1.0"
