"""Few-shot temporal action localization with chain-of-evidence text guidance."""

__version__ = "0.1.0"
