"""Desk-scale INP-Former: intrinsic normal prototypes for anomaly detection."""

__version__ = "0.1.0"
