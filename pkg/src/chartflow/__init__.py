"""Chart-based incompressible Navier–Stokes solver on flat tori.

The torus is covered by overlapping rectangular charts.  Each chart
carries its own grid, Dirichlet pressure solver and implicit parabolic
stepper; charts communicate only through pressure boundary data blended
with a partition of unity.  A growth-control field keeps the controlled
velocity bounded across steps.
"""

from chartflow.elliptic import (DirichletProblem, GreenMatrix, assemble_green_matrix,
                                leray_gradient, solve_dirichlet)
from chartflow.errors import (ChartflowError, ConfigError, ContractionError, GeometryError,
                              NumericalError, StagnationError)
from chartflow.geometry import (Atlas, ChartGeometry, build_torus_atlas, christoffel_from_metric,
                                coefficient_preset)
from chartflow.grid import (ChartField, FieldNorms, c12_norm, divergence, hessian, partial,
                            transfer)
from chartflow.leray import (LeraySources, boundary_pressure_data, s_coupling, s_functional,
                             s_interior)
from chartflow.parabolic import (GaussianKernel, ParabolicStepProblem, gaussian_eval,
                                 levy_expansion, parabolic_step)
from chartflow.scheme import (GlobalState, SchemeConfig, control_increment_simple,
                              control_increment_switched, init, iterate_m, run, subiterate_p,
                              time_step)

__version__ = "0.1.0"

__all__ = [
    "Atlas", "ChartGeometry", "build_torus_atlas", "christoffel_from_metric", "coefficient_preset",
    "ChartField", "FieldNorms", "partial", "hessian", "divergence", "c12_norm", "transfer",
    "DirichletProblem", "GreenMatrix", "solve_dirichlet", "assemble_green_matrix", "leray_gradient",
    "GaussianKernel", "ParabolicStepProblem", "gaussian_eval", "levy_expansion", "parabolic_step",
    "LeraySources", "s_functional", "s_interior", "s_coupling", "boundary_pressure_data",
    "SchemeConfig", "GlobalState", "init", "subiterate_p", "iterate_m",
    "control_increment_simple", "control_increment_switched", "time_step", "run",
    "ChartflowError", "ConfigError", "GeometryError", "NumericalError", "ContractionError",
    "StagnationError",
]
