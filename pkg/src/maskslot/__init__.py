"""maskslot - semantic-aware masked slot attention for video object discovery."""

__version__ = "1.0.0"
