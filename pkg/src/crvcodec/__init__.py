"""Desk-scale learned video codec: conditional residual coding with hybrid
explicit/implicit temporal buffering, plus the training and evaluation
machinery needed to study buffering variants end to end."""

__version__ = "0.1.0"
