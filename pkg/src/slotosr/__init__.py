"""Slot-based mixed open-set recognition on synthetic multi-object scenes."""

__version__ = "0.1.0"
