"""
RDED Learning Toolkit

This package solves random differential equations with discrete and distributed
delays and learns them back from samples of observed trajectories: history index
surface, varying coefficients, covariate lags and selected covariates.
"""

__version__ = '1.0.0'
