"""Concept-based surrogate explainer for arbitrary black-box classifiers."""

__version__ = "0.1.0"
