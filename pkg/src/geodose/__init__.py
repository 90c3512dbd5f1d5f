"""Bayesian geostatistical mapping of log dose rates with SPDE/GMRF fields."""

__version__ = "0.1.0"
