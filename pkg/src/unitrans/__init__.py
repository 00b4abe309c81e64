"""Unified multi-task sign language translation toolkit."""

__version__ = "0.1.0"
