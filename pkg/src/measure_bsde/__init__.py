"""Measure solutions of backward stochastic differential equations.

The fixed point ``zeta = g(., Y, Z)`` is solved for the drift of a density
process, on a binary lattice (exact conditional expectations) or on
simulated Brownian paths (least-squares regression).
"""

__version__ = "0.1.0"

from .core import (AdaptedProcess, LatticeModel, PathEnsemble, TerminalCondition, TimeGrid,
                   build_lattice, simulate_paths, terminal_builtin)
from .errors import (BasisError, ConfigError, ContractError, DomainError, ImportanceWeightError,
                     InvalidDensityError, MeasureBsdeError, NotRepresentableError, ResourceError)
from .generators import (GeneratorF, GeneratorG, Growth, build_generator, catalog_generator, f_to_g,
                         g_to_f, inf_convolve, mollify, truncate_nm)
from .lattice import MeasureSolutionResult, SolverOptions, solve_measure_solution
from .montecarlo import McOptions, McSolveReport, RegressionBasis, mc_solve
from .bmo import (BmoReport, apriori_z_bound, bmo_norm, negative_moment_bound, reverse_holder_bound,
                  reverse_holder_exponent)
from .stability import SequenceScenario, StabilityReport, run_stability

__all__ = [
    "AdaptedProcess", "LatticeModel", "PathEnsemble", "TerminalCondition", "TimeGrid",
    "build_lattice", "simulate_paths", "terminal_builtin",
    "BasisError", "ConfigError", "ContractError", "DomainError", "ImportanceWeightError",
    "InvalidDensityError", "MeasureBsdeError", "NotRepresentableError", "ResourceError",
    "GeneratorF", "GeneratorG", "Growth", "build_generator", "catalog_generator", "f_to_g", "g_to_f",
    "inf_convolve", "mollify", "truncate_nm",
    "MeasureSolutionResult", "SolverOptions", "solve_measure_solution",
    "McOptions", "McSolveReport", "RegressionBasis", "mc_solve",
    "BmoReport", "apriori_z_bound", "bmo_norm", "negative_moment_bound", "reverse_holder_bound",
    "reverse_holder_exponent",
    "SequenceScenario", "StabilityReport", "run_stability",
]
