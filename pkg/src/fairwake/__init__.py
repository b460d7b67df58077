"""Demographics-agnostic bias mitigation toolkit for wake-up-word detection."""

__version__ = "0.1.0"
