"""Counterfactually fair longitudinal clinical prediction with a learned deconfounder."""

__version__ = "0.1.0"
