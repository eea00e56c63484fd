"""Association encoder at desk scale: background attention, window-attention
association module and their fusion into a DETR-style encoder."""

__version__ = "0.1.0"
