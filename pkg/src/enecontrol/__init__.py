"""Neighboring-extremal adaptation of constrained optimal control.

Given a solved finite-horizon problem, this library precomputes time-varying
feedback gain schedules that adapt the nominal control to state and preview
perturbations at negligible online cost, handles non-optimal nominals through
a feedforward correction, and walks large perturbations through constraint
activity changes with a multi-segment homotopy.
"""

from .costates import CostateTrajectory, backward_costates
from .ene import (
    DeltaTrajectory,
    GainSchedule,
    HamiltonianBlocks,
    PerturbationState,
    ene_control,
    hamiltonian_blocks,
    kkt_inverse,
    riccati_backward,
    simulate_delta,
)
from .errors import (
    ConfigError,
    CycleDetected,
    EneError,
    NonFinite,
    NotSymmetric,
    RankDeficientActiveSet,
    SegmentBudgetExceeded,
    SingularKkt,
    SingularMatrix,
    SolveFailed,
    TooManyActive,
    ZuuNotPositive,
)
from .mene import (
    AdaptationResult,
    SegmentRecord,
    adapt_multi_segment,
    closed_loop_step,
    crossing_fractions,
    mene_control,
    multiplier_and_constraint_perturbations,
)
from .model import (
    ConstraintSet,
    CostSpec,
    DerivativeReport,
    PlantModel,
    PreviewSignal,
    active_indices,
    verify_derivatives,
)
from .numerics import fd_jacobian, is_positive_definite, solve_symmetric_indefinite
from .ocp import (
    KktReport,
    NominalSolution,
    OcpProblem,
    StepData,
    Trajectory,
    evaluate_cost,
    kkt_residual,
    linearize,
    rollout,
    solve_nominal,
)
from .oracle import StackedQpSolution, discrete_lqr, lq_adjoint_sweep, solve_stacked_qp
from .sim import (
    ComparisonTable,
    ControllerKind,
    SimResult,
    compare_controllers,
    preview_model_sweep,
    run_scenario,
)
from .systems import (
    PendulumParams,
    ScenarioSpec,
    equivalence_fixture,
    lqr_preview_system,
    pendulum_constraints,
    pendulum_continuous,
    pendulum_cost,
    pendulum_discrete,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
