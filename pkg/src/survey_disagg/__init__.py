"""Bayesian spatio-temporal disaggregation of survey-based areal proportions."""
__version__ = "0.1.0"
