"""Occupancy forecasting toolkit - source package."""
