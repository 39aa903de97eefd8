"""Masked image modeling with a frozen contrastive teacher, at desk scale."""

__version__ = "0.1.0"
