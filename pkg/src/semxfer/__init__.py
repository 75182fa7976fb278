"""Learn edits of a scene in one observation domain and apply them in another via a shared embedding."""

__version__ = "0.1.0"
