"""Chaos experiments driven by syscall error injection."""

__version__ = "0.1.0"
