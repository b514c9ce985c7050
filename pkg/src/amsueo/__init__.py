"""Executable model of a matrix-cipher RFID authentication protocol and the
passive multi-session attack that recovers its full secret state."""

__version__ = "0.1.0"
