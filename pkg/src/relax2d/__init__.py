"""Relaxation of planar Biot-type energies: analytic envelopes, grid-based
rank-one convexification with laminate extraction, and a finite element
energy minimizer."""

from .energy import (
    BIOT,
    DIST,
    DomainError,
    EnergyDensity,
    PenaltyConfig,
    dist_so2_bruteforce,
    get_energy,
    penalize,
    q_biot_pipkin_oracle,
    q_biot_unconstrained,
    q_dist_unconstrained,
    q_glp,
    seth_hill_energy,
    singular_values,
    w_biot,
    w_dist,
)

__version__ = "0.1.0"
