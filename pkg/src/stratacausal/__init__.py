"""Causal effects of longitudinal binary treatments with outcomes censored by death."""

__version__ = "0.1.0"
