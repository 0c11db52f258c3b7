"""Closed-loop experiment harness comparing six controllers on one scenario.

Controllers:
  OLNMPC  apply the precomputed nominal controls open loop.
  CLNMPC  re-solve the shrinking-horizon problem from the measured state and
          preview at every step and apply the first control.
  NE      per-step feedback on state deviations with preview-stripped gains.
  ENE     per-step feedback on state and preview deviations.
  MNE     multi-segment adaptation with preview-stripped machinery, then
          per-step state feedback around the adapted plan.
  MENE    multi-segment adaptation, then per-step state and preview feedback
          around the adapted plan.

When the multi-segment run changes no activity status it coincides with the
plain feedback law by construction, so MENE/MNE delegate to the ENE/NE
application in that case (identical control sequences).  The plant always
advances under the actual preview from the scenario generator; per-step wall
time covers only the control computation.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .costates import backward_costates
from .ene import GainSchedule, hamiltonian_blocks, riccati_backward
from .errors import EneError
from .mene import VIOLATION_TOL, adapt_multi_segment
from .ocp import NominalSolution, OcpProblem, Trajectory, linearize, solve_nominal
from .systems import ScenarioSpec

Array = np.ndarray


class ControllerKind(enum.Enum):
    OLNMPC = "olnmpc"
    CLNMPC = "clnmpc"
    NE = "ne"
    ENE = "ene"
    MNE = "mne"
    MENE = "mene"

    @staticmethod
    def parse(name: str) -> "ControllerKind":
        try:
            return ControllerKind(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown controller {name!r}") from None


ALL_CONTROLLERS = tuple(ControllerKind)


@dataclass
class SimResult:
    """Closed-loop record for one controller on one scenario."""

    kind: ControllerKind
    xs: Array  # (N+1, n) actual states
    us: Array  # (N, m) applied controls
    ws: Array  # (N+1, n_w) actual preview
    performance: float  # Frobenius norm of stacked output deviations
    step_times: Array  # (N,) seconds spent computing each control
    precompute_time: float  # seconds spent preparing the controller
    violations: list[tuple[int, int, float]] = field(default_factory=list)
    segments: int = 0
    failed: bool = False
    error: str = ""

    @property
    def median_step_time(self) -> float:
        times = self.step_times[3:] if self.step_times.size > 3 else self.step_times
        return float(np.median(times)) if times.size else 0.0

    @property
    def mean_step_time(self) -> float:
        times = self.step_times[3:] if self.step_times.size > 3 else self.step_times
        return float(np.mean(times)) if times.size else 0.0


def _performance(scenario: ScenarioSpec, xs: Array) -> float:
    dev = scenario.outputs(xs) - np.asarray(scenario.reference, dtype=float)
    return float(np.linalg.norm(dev))


def _gain_schedule(problem: OcpProblem, nominal: NominalSolution, stripped: bool) -> GainSchedule:
    data = linearize(problem, nominal.trajectory)
    blocks = hamiltonian_blocks(problem, nominal.trajectory, nominal.costates, data)
    if stripped:
        data = data.preview_stripped()
        blocks = blocks.preview_stripped()
    gains = riccati_backward(blocks, data, mode="optimal")
    gains.stripped = stripped
    return gains


@dataclass
class _FeedbackPlan:
    reference: Trajectory
    gains: GainSchedule
    state_only: bool
    segments: int = 0


def run_scenario(
    scenario: ScenarioSpec,
    controller: ControllerKind,
    nominal: Optional[NominalSolution] = None,
    max_iters: int = 200,
    opt_tol: float = 1e-6,
    max_segments: int = 32,
) -> SimResult:
    """Simulate one controller over the horizon against the actual preview."""
    problem = scenario.problem()
    if nominal is None:
        nominal = solve_nominal(problem, max_iters=max_iters, opt_tol=opt_tol)

    big_n = scenario.horizon
    n, m, n_w = problem.model.n, problem.model.m, problem.model.n_w
    preview = scenario.actual_preview()
    w_act = preview.sequence(big_n + 1, n_w, w0=problem.w0)
    if w_act is None:  # preview follows the nominal model: reuse the nominal sequence
        w_act = nominal.trajectory.ws.copy()
    x_init = problem.x0 + np.asarray(scenario.delta_x0, dtype=float)

    xs = np.zeros((big_n + 1, n))
    us = np.zeros((big_n, m))
    xs[0] = x_init
    step_times = np.zeros(big_n)
    violations: list[tuple[int, int, float]] = []
    segments = 0
    precompute = 0.0

    try:
        if controller in (ControllerKind.NE, ControllerKind.ENE):
            tic = time.perf_counter()
            plan = _FeedbackPlan(
                reference=nominal.trajectory,
                gains=_gain_schedule(problem, nominal, stripped=controller is ControllerKind.NE),
                state_only=controller is ControllerKind.NE,
            )
            precompute = time.perf_counter() - tic
        elif controller in (ControllerKind.MNE, ControllerKind.MENE):
            stripped = controller is ControllerKind.MNE
            tic = time.perf_counter()
            dx0 = xs[0] - nominal.trajectory.xs[0]
            dw0 = w_act[0] - nominal.trajectory.ws[0]
            result = adapt_multi_segment(
                problem, nominal, dx0, dw0, actual_preview=preview,
                max_segments=max_segments, stripped=stripped, opt_tol=opt_tol,
            )
            segments = len(result.segments)
            if result.activity_changed:
                plan = _FeedbackPlan(result.final_nominal, result.final_gains, stripped, segments)
            else:
                # No activity change: the adaptation coincides with the plain
                # feedback law, so share its exact application path.
                plan = _FeedbackPlan(
                    nominal.trajectory,
                    _gain_schedule(problem, nominal, stripped=stripped),
                    stripped,
                    segments,
                )
            precompute = time.perf_counter() - tic
        elif controller is ControllerKind.OLNMPC:
            plan = None
        elif controller is ControllerKind.CLNMPC:
            plan = None
        else:
            raise ValueError(f"unhandled controller {controller}")

        prev_us = nominal.trajectory.us
        for k in range(big_n):
            tic = time.perf_counter()
            if controller is ControllerKind.OLNMPC:
                u_k = nominal.trajectory.us[k].copy()
            elif controller is ControllerKind.CLNMPC:
                sub = OcpProblem(
                    horizon=big_n - k,
                    model=problem.model,
                    constraints=problem.constraints,
                    cost=problem.cost,
                    x0=xs[k],
                    w0=w_act[k],
                )
                warm = prev_us if prev_us.shape[0] == big_n - k else prev_us[1:]
                sol = solve_nominal(sub, max_iters=max_iters, opt_tol=opt_tol, init_controls=warm)
                prev_us = sol.trajectory.us
                u_k = prev_us[0].copy()
            else:
                dx = xs[k] - plan.reference.xs[k]
                dw = w_act[k] - plan.reference.ws[k]
                du = plan.gains.k_x[k] @ dx
                if not plan.state_only:
                    du = du + plan.gains.k_w[k] @ dw
                u_k = plan.reference.us[k] + du
            step_times[k] = time.perf_counter() - tic

            us[k] = u_k
            if problem.constraints.l:
                cvals = problem.constraints.c(xs[k], us[k], w_act[k])
                for i in range(problem.constraints.l):
                    if cvals[i] > VIOLATION_TOL:
                        violations.append((k, i, float(cvals[i])))
            xs[k + 1] = np.asarray(problem.model.f(xs[k], us[k], w_act[k]), dtype=float)
    except EneError as exc:
        return SimResult(
            kind=controller, xs=xs, us=us, ws=w_act,
            performance=float("inf"), step_times=step_times, precompute_time=precompute,
            violations=violations, segments=segments, failed=True, error=str(exc),
        )

    return SimResult(
        kind=controller,
        xs=xs,
        us=us,
        ws=w_act,
        performance=_performance(scenario, xs),
        step_times=step_times,
        precompute_time=precompute,
        violations=violations,
        segments=segments,
    )


@dataclass
class ComparisonRow:
    kind: ControllerKind
    performance: float
    median_step_time: float
    speedup_vs_clnmpc: float
    violations: int
    segments: int
    failed: bool


@dataclass
class ComparisonTable:
    scenario: str
    rows: list[ComparisonRow]
    results: dict[ControllerKind, SimResult]

    def row(self, kind: ControllerKind) -> ComparisonRow:
        for r in self.rows:
            if r.kind is kind:
                return r
        raise KeyError(kind)

    def to_markdown(self) -> str:
        lines = [
            f"# Controller comparison: {self.scenario}",
            "",
            "| controller | performance | median step time [ms] | speedup vs CLNMPC | violations | segments |",
            "|---|---|---|---|---|---|",
        ]
        for r in self.rows:
            perf = "failed" if r.failed else f"{r.performance:.6g}"
            lines.append(
                f"| {r.kind.value.upper()} | {perf} | {1e3 * r.median_step_time:.4g} "
                f"| {r.speedup_vs_clnmpc:.3g} | {r.violations} | {r.segments} |"
            )
        return "\n".join(lines) + "\n"


def compare_controllers(
    scenario: ScenarioSpec,
    kinds: Sequence[ControllerKind] = ALL_CONTROLLERS,
    nominal: Optional[NominalSolution] = None,
    max_iters: int = 200,
    opt_tol: float = 1e-6,
) -> ComparisonTable:
    """Run several controllers on one scenario around a shared nominal solve.

    Rows are ordered by performance (ascending, failed runs last, ties broken
    by controller name) so the table is deterministic.
    """
    if nominal is None:
        nominal = solve_nominal(scenario.problem(), max_iters=max_iters, opt_tol=opt_tol)
    results: dict[ControllerKind, SimResult] = {}
    for kind in kinds:
        results[kind] = run_scenario(scenario, kind, nominal=nominal, max_iters=max_iters, opt_tol=opt_tol)
    clnmpc_time = results[ControllerKind.CLNMPC].median_step_time if ControllerKind.CLNMPC in results else 0.0
    rows = [
        ComparisonRow(
            kind=kind,
            performance=res.performance,
            median_step_time=res.median_step_time,
            speedup_vs_clnmpc=(clnmpc_time / res.median_step_time) if res.median_step_time > 0 else float("inf"),
            violations=len(res.violations),
            segments=res.segments,
            failed=res.failed,
        )
        for kind, res in results.items()
    ]
    rows.sort(key=lambda r: (r.failed, r.performance, r.kind.value))
    return ComparisonTable(scenario.name, rows, results)


@dataclass
class SweepEntry:
    preview_model: str
    results: dict[ControllerKind, SimResult]


@dataclass
class SweepReport:
    entries: list[SweepEntry]

    def better_model(self, kind: ControllerKind) -> str:
        best = min(self.entries, key=lambda e: e.results[kind].performance)
        return best.preview_model


def preview_model_sweep(
    scenario: ScenarioSpec,
    models: Sequence[str] = ("hold", "recursion"),
    kinds: Sequence[ControllerKind] = (ControllerKind.ENE, ControllerKind.MENE),
    max_iters: int = 200,
    opt_tol: float = 1e-6,
) -> SweepReport:
    """Re-solve and re-run the scenario under each nominal preview model."""
    entries = []
    for model_kind in models:
        spec = replace(scenario, preview_model=model_kind, name=f"{scenario.name}-{model_kind}")
        nominal = solve_nominal(spec.problem(), max_iters=max_iters, opt_tol=opt_tol)
        results = {
            kind: run_scenario(spec, kind, nominal=nominal, max_iters=max_iters, opt_tol=opt_tol)
            for kind in kinds
        }
        entries.append(SweepEntry(model_kind, results))
    return SweepReport(entries)
