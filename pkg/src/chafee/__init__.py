"""Numerics for the heterogeneous stochastic Chafee-Infante equation.

du = (Laplacian u - g u + alpha u - u^3) dt + sigma dW on [0, L] with
Dirichlet ends: spectra, simulation, finite-time Lyapunov exponents,
early-warning covariances and first-exit statistics.
"""

__version__ = "0.1.0"
