"""Desk-scale zero-shot TTS from multi-scale acoustic prompts."""

__version__ = "0.1.0"
