"""Spatio-temporal kriging with dynamic metadata graphs, phase correction and adversarial transfer."""

__version__ = "0.1.0"
