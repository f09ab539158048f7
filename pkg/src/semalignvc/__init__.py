"""Desk-scale zero-shot voice conversion with speaker-free semantic encoding."""

__version__ = "0.1.0"
