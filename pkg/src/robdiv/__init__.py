"""Robust optimal dividend toolkit: free-boundary solver, worst-case Monte
Carlo verifier, recursive-utility lattice, and ambiguity-aversion sweeps."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    AssumptionReport,
    OrnsteinUhlenbeck,
    SurplusModel,
    TabulatedC1,
    check_assumptions,
    eval_mu_sigma,
    psi_roots,
)
