"""Multi-granularity image-text alignment for description-based person
retrieval, desk scale."""

__version__ = "0.1.0"
