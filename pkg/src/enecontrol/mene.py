"""Modified feedback for non-optimal nominals and the multi-segment homotopy.

When the nominal trajectory is not stationary, the control stationarity
residual enters the perturbation feedback as a feedforward correction

    du(k) = K_x dx(k) + K_w dw(k) + K_corr [f_u^T t_x(k+1) + r_u(k); 0]

with the affine drifts t_x/t_w propagated by the non-optimal backward pass.

Large perturbations can flip constraint activity.  The multi-segment
procedure walks a straight line from the nominal initial conditions to the
perturbed ones, splitting at the smallest fraction where a multiplier hits
zero (active row leaving) or a constraint value hits zero (inactive row
entering).  At each split the activity status is toggled and the gains are
rebuilt around the partially shifted nominal, which is re-rolled nonlinearly
so it stays dynamically feasible (the premise of the non-optimal analysis).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .costates import CostateTrajectory, backward_costates
from .ene import (
    DeltaTrajectory,
    GainSchedule,
    HamiltonianBlocks,
    PerturbationState,
    hamiltonian_blocks,
    riccati_backward,
    simulate_delta,
)
from .errors import CycleDetected, NonFinite, SegmentBudgetExceeded, TooManyActive, ZuuNotPositive
from .model import PreviewSignal
from .ocp import NominalSolution, OcpProblem, StepData, Trajectory, linearize, rollout

Array = np.ndarray

# Crossing fractions at or below this are treated as an immediate activity flip.
ZERO_CROSSING_TOL = 1e-9
# Denominators at or below this magnitude never produce a crossing.
DENOM_TOL = 1e-12
# Homotopy progress below this across consecutive flips counts as a cycle.
PROGRESS_TOL = 1e-10
# Constraint values above this are reported as violations.
VIOLATION_TOL = 1e-6


def mene_control(
    gains: GainSchedule,
    k: int,
    pert: PerturbationState,
    t_next: Optional[Array] = None,
    hu_k: Optional[Array] = None,
) -> Array:
    """Feedback plus the non-optimal feedforward correction at step k.

    ``t_next`` and ``hu_k`` default to the values stored on the schedule; with
    both identically zero this reduces exactly to the plain feedback law.
    """
    t_next = gains.t_x[k + 1] if t_next is None else np.asarray(t_next, dtype=float)
    hu_k = gains.hu[k] if hu_k is None else np.asarray(hu_k, dtype=float)
    corr = gains.fu[k].T @ t_next + hu_k
    pad = np.concatenate([corr, np.zeros(len(gains.active[k]))])
    return gains.k_x[k] @ pert.dx + gains.k_w[k] @ pert.dw + gains.k_corr[k] @ pad


def multiplier_and_constraint_perturbations(
    gains: GainSchedule,
    data: StepData,
    k: int,
    pert: PerturbationState,
) -> tuple[Array, Array]:
    """Predicted multiplier perturbation (active rows) and constraint
    perturbation (all rows) at one step.

    The multiplier prediction is the pure feedback law; the constraint
    prediction uses the full constraint Jacobians and includes the
    feedforward correction through du.
    """
    dmu = gains.k_mu_x[k] @ pert.dx + gains.k_mu_w[k] @ pert.dw
    du = mene_control(gains, k, pert)
    dc = data.cx[k] @ pert.dx + data.cu[k] @ du + data.cw[k] @ pert.dw
    return dmu, dc


@dataclass
class Crossing:
    step: int
    index: int  # constraint index (global row)
    kind: str  # "deactivate" (multiplier hit zero) or "activate" (constraint hit zero)
    fraction: float


def crossing_fractions(
    mu0: list[Array],
    c0: Array,
    dmu: list[Array],
    dc: Array,
    active: list[tuple[int, ...]],
) -> tuple[Array, Optional[Crossing]]:
    """Per-step smallest crossing fraction along the perturbation direction.

    Active rows cross when the multiplier is driven to zero (denominator
    negative); inactive rows cross when the constraint value is driven to
    zero (denominator positive).  Fractions outside the motion toward the
    boundary, or with negligible denominators, are mapped to 1.  Ties break
    on the lowest step, then the lowest constraint index.
    """
    big_n = len(active)
    alpha = np.ones(big_n)
    best: Optional[Crossing] = None
    for k in range(big_n):
        idx = list(active[k])
        candidates: list[Crossing] = []
        for local, ci in enumerate(idx):
            denom = float(dmu[k][local])
            if denom < -DENOM_TOL:
                frac = -float(mu0[k][local]) / denom
                if frac <= 1.0:
                    candidates.append(Crossing(k, ci, "deactivate", max(frac, 0.0)))
        l = dc.shape[1] if dc.ndim == 2 else 0
        for ci in range(l):
            if ci in idx:
                continue
            denom = float(dc[k, ci])
            if denom > DENOM_TOL:
                frac = -float(c0[k, ci]) / denom
                if frac <= 1.0:
                    candidates.append(Crossing(k, ci, "activate", max(frac, 0.0)))
        if candidates:
            step_best = min(candidates, key=lambda c: (c.fraction, c.index))
            alpha[k] = step_best.fraction
            if best is None or (step_best.fraction, step_best.step, step_best.index) < (
                best.fraction,
                best.step,
                best.index,
            ):
                best = step_best
    return alpha, best


@dataclass
class SegmentRecord:
    """One homotopy segment: entry conditions, crossing fractions, and the
    control contribution it added."""

    index: int
    entry_x0: Array
    entry_w0: Array
    alphas: Array
    fraction: float  # fraction of the remaining perturbation applied
    applied_fraction: float  # fraction of the original perturbation applied
    flip: Optional[tuple[int, int, str]]  # (step, constraint, kind) when an activity flip occurred
    du: Optional[Array]
    kkt_norm: float


@dataclass
class AdaptationResult:
    """Output of the multi-segment adaptation."""

    u_star: Array  # adapted control sequence u_nominal + sum of contributions
    trajectory: Trajectory  # rollout of u_star on the plant with the actual preview
    segments: list[SegmentRecord]
    violations: list[tuple[int, int, float]]  # (step, constraint, magnitude)
    final_nominal: Trajectory
    final_gains: GainSchedule
    activity_changed: bool
    completed: bool

    @property
    def total_applied_fraction(self) -> float:
        return float(sum(s.applied_fraction for s in self.segments))


def _constraint_values(problem: OcpProblem, traj: Trajectory) -> Array:
    l = problem.constraints.l
    vals = np.zeros((traj.horizon, l))
    for k in range(traj.horizon):
        if l:
            vals[k] = problem.constraints.c(traj.xs[k], traj.us[k], traj.ws[k])
    return vals


def _scan_violations(problem: OcpProblem, traj: Trajectory) -> list[tuple[int, int, float]]:
    out = []
    vals = _constraint_values(problem, traj)
    for k in range(vals.shape[0]):
        for i in range(vals.shape[1]):
            if vals[k, i] > VIOLATION_TOL:
                out.append((k, i, float(vals[k, i])))
    return out


def _reroll_nominal(problem: OcpProblem, x0: Array, w0: Array, us: Array, active: list[tuple[int, ...]]) -> Trajectory:
    """Nonlinear re-roll of a shifted nominal, keeping the tracked activity."""
    model = problem.model
    big_n = us.shape[0]
    xs = np.zeros((big_n + 1, model.n))
    ws = np.zeros((big_n + 1, model.n_w))
    xs[0] = x0
    ws[0] = w0
    for k in range(big_n):
        xs[k + 1] = np.asarray(model.f(xs[k], us[k], ws[k]), dtype=float)
        ws[k + 1] = np.asarray(model.g(xs[k], ws[k]), dtype=float)
        if not np.all(np.isfinite(xs[k + 1])):
            raise NonFinite(f"shifted nominal diverged at step {k}")
    return Trajectory(xs, us.copy(), ws, list(active), rolled_out=True)


@dataclass
class _SegmentBuild:
    data: StepData
    costates: CostateTrajectory
    blocks: HamiltonianBlocks
    gains: GainSchedule
    kkt_norm: float


def _build_segment(problem: OcpProblem, nominal: Trajectory, stripped: bool, opt_tol: float) -> _SegmentBuild:
    data = linearize(problem, nominal)
    costates = backward_costates(problem, nominal, data)
    kkt_norm = costates.kkt_norm
    hu = costates.stationarity
    if kkt_norm <= opt_tol:
        # Residuals below the optimality tolerance are measurement noise of the
        # nominal solve; treating them as zero keeps the stationary-nominal
        # policy exactly equal to the plain feedback law.
        hu = np.zeros_like(hu)
    blocks = hamiltonian_blocks(problem, nominal, costates, data)
    data_eff = data.preview_stripped() if stripped else data
    blocks_eff = blocks.preview_stripped() if stripped else blocks
    gains = riccati_backward(blocks_eff, data_eff, mode="nonoptimal", hu=hu)
    if stripped:
        gains.stripped = True
    return _SegmentBuild(data_eff, costates, blocks_eff, gains, kkt_norm)


def adapt_multi_segment(
    problem: OcpProblem,
    nominal: NominalSolution,
    dx0: Array,
    dw0: Array,
    actual_preview: Optional[PreviewSignal] = None,
    max_segments: int = 32,
    stripped: bool = False,
    opt_tol: float = 1e-6,
) -> AdaptationResult:
    """Adapt a nominal solution to an initial perturbation, splitting at
    activity changes.

    Per segment: build costates and non-optimal gains around the current
    nominal, propagate the linearized perturbation computing multiplier and
    constraint predictions, and find the smallest crossing fraction.  A zero
    fraction toggles the blocking constraint's activity and rebuilds; a
    positive fraction applies that share of the remaining perturbation, shifts
    the nominal origin, and continues until the full perturbation is consumed.
    The adapted controls are finally rolled out on the plant with the actual
    preview signal.
    """
    dx0 = np.asarray(dx0, dtype=float)
    dw0 = np.asarray(dw0, dtype=float)
    current = nominal.trajectory.copy()
    rem_dx, rem_dw = dx0.copy(), dw0.copy()
    remaining_share = 1.0
    segments: list[SegmentRecord] = []
    flips_since_progress: set[tuple[int, int]] = set()
    activity_changed = False
    completed = False
    build = None

    for seg_index in range(max_segments):
        build = _build_segment(problem, current, stripped, opt_tol)
        delta = simulate_delta(build.gains, build.data, rem_dx, rem_dw, corrections=True)
        c0 = _constraint_values(problem, current)
        alphas, blocking = crossing_fractions(build.costates.mu, c0, delta.dmu, delta.dc, current.active)
        lam = 1.0 if blocking is None else blocking.fraction

        if blocking is not None and lam <= ZERO_CROSSING_TOL:
            key = (blocking.step, blocking.index)
            if key in flips_since_progress:
                raise CycleDetected(blocking.step, blocking.index)
            flips_since_progress.add(key)
            new_active = list(current.active)
            step_set = set(new_active[blocking.step])
            if blocking.kind == "activate":
                step_set.add(blocking.index)
                if len(step_set) > problem.model.m:
                    raise TooManyActive(
                        f"{len(step_set)} active constraints at step {blocking.step} with m={problem.model.m}"
                    )
            else:
                step_set.discard(blocking.index)
            new_active[blocking.step] = tuple(sorted(step_set))
            current = current.copy()
            current.active = new_active
            activity_changed = True
            segments.append(
                SegmentRecord(
                    index=seg_index,
                    entry_x0=current.xs[0].copy(),
                    entry_w0=current.ws[0].copy(),
                    alphas=alphas,
                    fraction=0.0,
                    applied_fraction=0.0,
                    flip=(blocking.step, blocking.index, blocking.kind),
                    du=None,
                    kkt_norm=build.kkt_norm,
                )
            )
            continue

        applied = simulate_delta(build.gains, build.data, lam * rem_dx, lam * rem_dw, corrections=True)
        new_us = current.us + applied.du
        new_x0 = current.xs[0] + lam * rem_dx
        new_w0 = current.ws[0] + lam * rem_dw
        segments.append(
            SegmentRecord(
                index=seg_index,
                entry_x0=current.xs[0].copy(),
                entry_w0=current.ws[0].copy(),
                alphas=alphas,
                fraction=lam,
                applied_fraction=lam * remaining_share,
                flip=None,
                du=applied.du.copy(),
                kkt_norm=build.kkt_norm,
            )
        )
        current = _reroll_nominal(problem, new_x0, new_w0, new_us, current.active)
        remaining_share *= 1.0 - lam
        rem_dx = (1.0 - lam) * rem_dx
        rem_dw = (1.0 - lam) * rem_dw
        if lam > PROGRESS_TOL:
            flips_since_progress.clear()
        if lam >= 1.0 - 1e-15:
            completed = True
            break

    if not completed:
        raise SegmentBudgetExceeded(segments)

    # Feedback gains around the adapted plan, for online application.  When the
    # control curvature is indefinite around the shifted plan the last segment's
    # schedule (valid in a first-order neighborhood) is kept instead.
    try:
        final_build = _build_segment(problem, current, stripped, opt_tol)
    except ZuuNotPositive:
        final_build = build
    u_star = current.us.copy()
    # The real system starts at the fully perturbed initial conditions.
    shifted = replace(problem, x0=current.xs[0], w0=current.ws[0])
    final_traj = rollout(shifted, u_star, preview_override=actual_preview)
    violations = _scan_violations(problem, final_traj)
    return AdaptationResult(
        u_star=u_star,
        trajectory=final_traj,
        segments=segments,
        violations=violations,
        final_nominal=current,
        final_gains=final_build.gains,
        activity_changed=activity_changed,
        completed=completed,
    )


def closed_loop_step(
    problem: OcpProblem,
    plan: Trajectory,
    measured_x: Array,
    measured_w: Array,
    actual_preview: Optional[PreviewSignal] = None,
    max_segments: int = 32,
    opt_tol: float = 1e-6,
) -> tuple[Array, AdaptationResult, OcpProblem]:
    """Receding-horizon reuse of a previous plan as a non-optimal nominal.

    The previous plan is shifted by one step (horizon shrinks by one), the
    measured deviations from its first remaining point become the new initial
    perturbation, and one multi-segment adaptation produces the next control.
    """
    if plan.horizon < 2:
        raise ValueError("plan too short to shift")
    tail = Trajectory(
        xs=plan.xs[1:].copy(),
        us=plan.us[1:].copy(),
        ws=plan.ws[1:].copy(),
        active=list(plan.active[1:]),
        rolled_out=True,
    )
    shifted_problem = OcpProblem(
        horizon=plan.horizon - 1,
        model=problem.model,
        constraints=problem.constraints,
        cost=problem.cost,
        x0=tail.xs[0],
        w0=tail.ws[0],
    )
    costates = backward_costates(shifted_problem, tail)
    pseudo = NominalSolution(
        trajectory=tail,
        costates=costates,
        kkt_norm=costates.kkt_norm,
        is_optimal=costates.kkt_norm <= opt_tol,
        cost=float("nan"),
    )
    dx0 = np.asarray(measured_x, dtype=float) - tail.xs[0]
    dw0 = np.asarray(measured_w, dtype=float) - tail.ws[0]
    result = adapt_multi_segment(
        shifted_problem, pseudo, dx0, dw0, actual_preview=actual_preview,
        max_segments=max_segments, opt_tol=opt_tol,
    )
    return result.u_star[0].copy(), result, shifted_problem
