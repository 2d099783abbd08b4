"""Few-shot classification with task-specific embedding adaptation."""

__version__ = "0.1.0"
