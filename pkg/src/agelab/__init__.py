"""Transfer-learning toolkit for gender recognition and age estimation."""

__version__ = "0.1.0"
