"""CNN feature extractors with random-feature GP heads, trained by Monte Carlo dropout."""

__version__ = "0.1.0"
