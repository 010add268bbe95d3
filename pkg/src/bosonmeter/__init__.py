"""Randomized local-measurement estimation for bosonic observables.

Truncated modes are handled as qudits (generalized Gell-Mann strings and
Clifford shadows); continuous modes use homodyne p-x strings on Gaussian states.
"""

from .observables import GGB, PX, Observable, VibrationalConfig, build_vibrational_hamiltonian, decompose_ggb
from .schemes import EstimationReport, MeasurementScheme, estimate, exact_variance, make_scheme

__all__ = [
    "GGB",
    "PX",
    "Observable",
    "VibrationalConfig",
    "build_vibrational_hamiltonian",
    "decompose_ggb",
    "EstimationReport",
    "MeasurementScheme",
    "estimate",
    "exact_variance",
    "make_scheme",
]

__version__ = "0.1.0"
