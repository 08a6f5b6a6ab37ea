"""Permutation-free joint CTC/attention multi-speaker recognition on numpy."""

__version__ = "0.1.0"
