"""Coarse-to-fine 4D occupancy forecasting: grids, BEV flow, forecasting,
quality fusion and evaluation."""

__version__ = "0.1.0"
