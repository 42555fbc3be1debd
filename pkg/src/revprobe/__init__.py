"""Quantized reverse probing: how much of a representation's cluster structure
do human-interpretable concepts explain?"""

__version__ = "0.1.0"
