"""Task-specific memory conditioning on a synthetic multi-task benchmark."""

__version__ = "1.0.0"
