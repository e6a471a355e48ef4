"""Bit-exact emulation of approximate-multiplier CNN inference and its
adversarial robustness."""

__version__ = "0.1.0"
