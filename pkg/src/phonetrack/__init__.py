"""Phonetic speech features, forward TRF models and match-mismatch classification for EEG."""

__version__ = "0.1.0"
