"""Long-run average reward control of a regime-switching surplus model."""

__version__ = "0.1.0"
