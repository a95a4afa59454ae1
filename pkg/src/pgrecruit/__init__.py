"""Recruitment modelling with screening dropout under the Poisson-gamma model."""

__version__ = "0.1.0"
