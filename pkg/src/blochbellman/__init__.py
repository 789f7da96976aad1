"""Continuously observed qubits on the Bloch ball.

Simulation of the diffusive filtering equation with feedback, stochastic
generators of state functionals, and Bellman/HJB grid solvers for
measurement-based control.
"""

__version__ = "0.1.0"
