"""Desk-scale cross-view completion pre-training and dense stereo/flow toolkit."""

__version__ = "0.1.0"
