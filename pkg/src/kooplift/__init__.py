"""Data-driven linearization of nonlinear dynamics.

Learn observable (lifting) functions with a Kolmogorov-Arnold network or an
MLP, fit a finite-dimensional linear surrogate with EDMD(c) least squares,
predict with corrected rollouts, and regulate with an LQR controller built on
the learned model.
"""

__version__ = "0.1.0"
