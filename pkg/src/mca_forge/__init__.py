"""Mutual context attention for paired video synthesis, at toy scale."""

__version__ = "0.1.0"
