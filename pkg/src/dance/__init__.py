"""Decoy-enhanced saliency maps for small feed-forward classifiers."""

__version__ = "0.1.0"
