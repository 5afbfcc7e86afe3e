"""Classic and learned fitting of linear-blend-skinned parametric models."""

__version__ = "0.1.0"
