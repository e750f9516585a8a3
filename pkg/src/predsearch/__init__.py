"""Predictor-guided architecture search with projected gradient ascent."""

__version__ = "0.1.0"
