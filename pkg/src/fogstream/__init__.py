"""Desk-scale deterministic model of a sensor-fog-cloud streaming platform."""

__version__ = "0.1.0"
