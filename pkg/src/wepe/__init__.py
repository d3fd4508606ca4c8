"""Detecting AI-generated images via feature sensitivity to weight perturbation."""

__version__ = "0.1.0"
