"""Offline exporter: audio files to frozen HuBERT feature files (.sft)."""

__version__ = "0.1.0"
