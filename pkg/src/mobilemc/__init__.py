"""Diffusive mobile molecular communication with an absorbing receiver.

Submodules
----------
numerics
    Special functions, quadrature, root finding and LP helpers.
channel
    Environment parameters, the channel impulse response and the
    transceiver distance law.
cir_stats
    Mean, second moment and distribution of the time-variant CIR.
particle_sim
    Monte Carlo simulation of transmitter and receiver motion.
drug_delivery
    Minimum-dose release design for targeted drug delivery.
mc_link
    Threshold, release allocation and frame duration of an on-off keyed link.
cli
    The ``mcmc`` command-line tool.
"""

from .channel import EnvParams, DistanceLaw, cir, cir_peak, mc_link_env, table1_env
from .cir_stats import CirStatistics, cir_moments_batch
from .numerics import (
    BracketError,
    DomainError,
    InfeasibleError,
    NonConvergenceError,
    QuadratureSpec,
)

__version__ = "1.0.0"

__all__ = [
    "EnvParams",
    "DistanceLaw",
    "cir",
    "cir_peak",
    "table1_env",
    "mc_link_env",
    "CirStatistics",
    "cir_moments_batch",
    "QuadratureSpec",
    "DomainError",
    "BracketError",
    "NonConvergenceError",
    "InfeasibleError",
    "__version__",
]
