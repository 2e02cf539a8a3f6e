"""Structured anchor-guided aggregation over patch-token feature corpora."""

__version__ = "0.1.0"
