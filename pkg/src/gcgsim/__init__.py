"""Graph similarity learning with aligned/unaligned substructure disentanglement."""

__version__ = "0.1.0"
