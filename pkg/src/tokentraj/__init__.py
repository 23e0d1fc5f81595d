"""Token-embedded recurrent trajectory models for ordinal outcomes."""

__version__ = "0.1.0"
