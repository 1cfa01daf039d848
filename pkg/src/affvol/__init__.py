"""Affine Volterra processes: kernels, resolvents, Riccati-Volterra equations,
transforms, Monte Carlo simulation and Fourier pricing."""

__version__ = "0.1.0"
