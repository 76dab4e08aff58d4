"""Simulation and training workbench for frequency control of lossless power networks.

Subpackages cover the network model and equilibrium solver (`netmodel`),
swing-dynamics integration (`dynamics`), droop / monotone piecewise-linear /
adaptive controllers (`controllers`), energy-function certification
(`lyapunov`), scenario generation and gradient-based controller training
(`training`), and the command-line front end (`cli`).
"""

__version__ = "0.1.0"

from . import controllers, dynamics, lyapunov, netmodel, training  # noqa: F401
