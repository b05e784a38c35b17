"""Adaptive unfitted finite elements for the Poisson problem on level-set domains."""
from .geometry import (
    Circle, Complement, HalfPlane, Intersection, LevelSet, Linear, Translated, Union, Wedge,
    interpolate_levelset, levelset_from_dict,
)
from .mesh import TriMesh, build_background_mesh, extract_active, refine
from .assembly import BoundaryData, FeSpace, P1Field, SolverError, assemble, solve, energy_error
from .estimator import BcMesh, IndicatorField, build_bc_mesh, compute_indicators, effectivity, oscillation
from .amr import AmrConfig, AmrHistory, AmrRecord, adapt, dorfler_mark, fit_rate, fraction_mark
from .problems import BenchmarkSpec, custom, example1, example2, example3, example4, get_example

__version__ = "0.1.0"
