"""Topographic single-head attention: spatial querying, spatial reweighting, and probing analyses."""

__version__ = "0.1.0"
