"""Patch-based crowd counting: overlapping-window features, spatial-sequence
LSTM local-count regression, density maps, evaluation and transfer tooling.
"""

__version__ = "0.1.0"
