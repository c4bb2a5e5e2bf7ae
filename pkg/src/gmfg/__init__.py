"""Graphon mean-field games: equilibrium solvers, audits and finite-N simulation."""

__version__ = "0.1.0"

from .dynamics import propagate, trajectory
from .graphon import AgentClassGrid, Graphon, PopulationStructure, class_coupling, evaluate, statistically_equivalent
from .grid import MeanFieldGrid
from .model import ModelSpec, aggregate, check_assumptions, kernel, malware_model
from .solver_finite import FixedPointConfig, PolicyTable, solve_finite, stage_fixed_point
from .solver_infinite import InfiniteConfig, StationarySolution, solve_infinite, stationary_mean_field
from .verify import best_response_value, converse_scan, equilibrium_gap
