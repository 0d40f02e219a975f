"""Galerkin solver for 2D incompressible Boussinesq flow with total-head
boundary control on one boundary part and heat-flux control on the other,
plus a box-constrained projected-gradient optimizer for the boundary-flux
cost functional."""

from .control_opt import (
    Box,
    Control,
    CostConfig,
    OptimizationHistory,
    OptimizerConfig,
    adjoint_gradient,
    eval_cost,
    fd_gradient,
    project_to_admissible,
    projected_gradient_descent,
    uniform_bound_report,
)
from .forms import (
    AssembledOperator,
    ConstantsReport,
    assemble_advection,
    assemble_buoyancy,
    assemble_convection_rot,
    assemble_divergence,
    assemble_flux_load,
    assemble_grad_stiffness,
    assemble_mass,
    assemble_pressure_load,
    assemble_rot_stiffness,
    estimate_coercivity,
    estimate_continuity,
    eval_b,
    eval_c,
)
from .mesh import Mesh, QuadratureRule, build_unit_square_mesh, edge_quadrature, triangle_quadrature
from .spaces import (
    AnalyticDivFreeField,
    DiscreteField,
    FunctionSpace,
    PolynomialField,
    build_space,
    h1_norm,
    interpolate,
    l2_norm,
    rot_seminorm,
)
from .time_stepper import (
    EnergyLog,
    FlowProblem,
    Forcing,
    LinearSolveFailed,
    PicardDiverged,
    SolverConfig,
    State,
    manufactured_convergence,
    recover_static_pressure,
    solve_step,
    solve_transient,
)

__version__ = "0.1.0"
