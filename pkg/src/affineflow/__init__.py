"""Numerical laboratory for affine motions of the compressible Euler system
with a vacuum free boundary.

The package has three layers:

* background dynamics: the matrix ODE for the affine deformation A(t),
  its conserved quantities, rescaled clocks, and asymptotic frame
  (:mod:`affineflow.background`);
* explicit Eulerian solutions and grid calculus on the unit ball used to
  verify them (:mod:`affineflow.fields`, :mod:`affineflow.grid`,
  :mod:`affineflow.calculus`);
* the perturbation solver and energy diagnostics built on top
  (:mod:`affineflow.perturb`, :mod:`affineflow.norms`).
"""

__version__ = "0.1.0"

from .params import GammaParams
from .errors import (
    InvalidParameterError,
    ConfigError,
    DegenerateFlowError,
    IntegrationError,
    EigenPathError,
)
from .background import (
    AffineState,
    AffineTrajectory,
    ConformalBackground,
    DerivedFrame,
    conformal_background,
    frame_from_state,
    integrate_affine,
    ode_energy,
    spin,
    asymptotics_report,
    export_trajectory_csv,
)
from .fitting import FitResult, loglinear_fit
from .grid import RadialGrid, CartesianGrid, ball_grid
from .fields import (
    AffineFields,
    TransformedFields,
    gl3_transform,
    euler_residual,
    residual_convergence,
    support_and_vacuum_checks,
    mass_reference,
    total_mass,
    export_fields_csv,
)
from .calculus import (
    flow_map_jacobian,
    lie_operators,
    commutator_suite,
    commutator_ladder,
    probe_points,
    probe_eval,
)
from .perturb import (
    SolverConfig,
    PerturbationSeries,
    solve_radial,
    solve_linear3d,
    decay_fit,
    weighted_l2,
    attractor_estimate,
    export_series_csv,
    write_run_manifest,
)
from .norms import (
    NormReport,
    weighted_norm,
    radial_weighted_integral,
    gauss_nodes,
    norm_report,
    radial_norm_report,
    series_norm_reports,
    s_norm,
    energy_and_dissipation,
    key_lemma_check,
    curl_transport_check,
    hardy_and_embedding_check,
    energy_inequality_report,
    equivalence_interval,
    eigen_frame,
    eigen_frame_path,
    export_norm_csv,
)

__all__ = [
    "GammaParams",
    "InvalidParameterError",
    "ConfigError",
    "DegenerateFlowError",
    "IntegrationError",
    "EigenPathError",
    "AffineState",
    "AffineTrajectory",
    "ConformalBackground",
    "DerivedFrame",
    "conformal_background",
    "frame_from_state",
    "integrate_affine",
    "ode_energy",
    "spin",
    "asymptotics_report",
    "export_trajectory_csv",
    "FitResult",
    "loglinear_fit",
    "RadialGrid",
    "CartesianGrid",
    "ball_grid",
    "AffineFields",
    "TransformedFields",
    "gl3_transform",
    "euler_residual",
    "residual_convergence",
    "support_and_vacuum_checks",
    "mass_reference",
    "total_mass",
    "export_fields_csv",
    "flow_map_jacobian",
    "lie_operators",
    "commutator_suite",
    "commutator_ladder",
    "probe_points",
    "probe_eval",
    "SolverConfig",
    "PerturbationSeries",
    "solve_radial",
    "solve_linear3d",
    "decay_fit",
    "weighted_l2",
    "attractor_estimate",
    "export_series_csv",
    "write_run_manifest",
    "NormReport",
    "weighted_norm",
    "radial_weighted_integral",
    "gauss_nodes",
    "norm_report",
    "radial_norm_report",
    "series_norm_reports",
    "s_norm",
    "energy_and_dissipation",
    "key_lemma_check",
    "curl_transport_check",
    "hardy_and_embedding_check",
    "energy_inequality_report",
    "equivalence_interval",
    "eigen_frame",
    "eigen_frame_path",
    "export_norm_csv",
    "__version__",
]
