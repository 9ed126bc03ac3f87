"""Passenger-demand forecasting with differential and aggregation attention."""

__version__ = "0.1.0"
