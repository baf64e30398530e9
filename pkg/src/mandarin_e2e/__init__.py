"""End-to-end Mandarin speech recognition with CTC and attention models."""

__version__ = "0.1.0"
