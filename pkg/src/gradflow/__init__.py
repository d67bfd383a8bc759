"""Gradient-flow dynamics lab.

Small dense networks trained by explicit-Euler gradient flow, plus the
machinery to interrogate what the flow converges to: margin oracles,
minimum-norm solvers, Hessian spectra at equilibria, weight-growth
asymptotics, and perturbation protocols that expose the null-space
random walk. Everything is float64 numpy at desk scale.
"""

__version__ = "0.1.0"
