"""Stochastic collocation for nonlinear magnetostatics with uncertain B-H curves."""

__version__ = "0.1.0"
