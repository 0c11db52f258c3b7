"""Horizon problem definition, rollouts, nominal solve, and KKT residuals.

The nominal solver is an iterated second-variation sweep: each iteration
builds costates and adaptation gains around the current trajectory (the same
machinery used online), takes the resulting Newton correction as a search
direction, and backtracks on the nonlinear cost.  Control-box constraints are
honored by clamping forward passes; activity is re-detected per iteration with
negative-multiplier rows released one per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import NonFinite, SolveFailed
from .model import ConstraintSet, CostSpec, PlantModel, PreviewSignal, active_indices

Array = np.ndarray

_DIVERGENCE_NORM = 1e12


@dataclass(frozen=True)
class OcpProblem:
    """Finite-horizon constrained problem: minimize the summed stage cost plus
    terminal cost subject to plant dynamics, the nominal preview model, and
    pointwise constraints, from fixed initial state and preview."""

    horizon: int
    model: PlantModel
    constraints: ConstraintSet
    cost: CostSpec
    x0: Array
    w0: Array

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "w0", np.asarray(self.w0, dtype=float))
        if self.x0.shape != (self.model.n,):
            raise ValueError(f"x0 shape {self.x0.shape} does not match state dimension {self.model.n}")
        if self.w0.shape != (self.model.n_w,):
            raise ValueError(f"w0 shape {self.w0.shape} does not match preview dimension {self.model.n_w}")


@dataclass
class Trajectory:
    """Horizon-indexed state/control/preview sequences with per-step activity."""

    xs: Array  # (N+1, n)
    us: Array  # (N, m)
    ws: Array  # (N+1, n_w)
    active: list[tuple[int, ...]]
    rolled_out: bool = False

    @property
    def horizon(self) -> int:
        return self.us.shape[0]

    def copy(self) -> "Trajectory":
        return Trajectory(self.xs.copy(), self.us.copy(), self.ws.copy(), list(self.active), self.rolled_out)


def rollout(
    problem: OcpProblem,
    controls: Array,
    preview_override: Optional[PreviewSignal] = None,
) -> Trajectory:
    """Simulate the plant over the horizon under the given control sequence.

    With ``preview_override`` the preview values are taken from the signal
    (actual-plant simulation) instead of the nominal preview model.
    """
    model = problem.model
    n, m, n_w, big_n = model.n, model.m, model.n_w, problem.horizon
    us = np.asarray(controls, dtype=float).reshape(big_n, m)
    xs = np.zeros((big_n + 1, n))
    xs[0] = problem.x0

    override = None
    if preview_override is not None:
        override = preview_override.sequence(big_n + 1, n_w, w0=problem.w0)
    if override is not None:
        ws = override.copy()
    else:
        ws = np.zeros((big_n + 1, n_w))
        ws[0] = problem.w0

    active: list[tuple[int, ...]] = []
    for k in range(big_n):
        xn = np.asarray(model.f(xs[k], us[k], ws[k]), dtype=float)
        if not np.all(np.isfinite(xn)) or float(np.max(np.abs(xn))) > _DIVERGENCE_NORM:
            raise NonFinite(f"state diverged at step {k}")
        xs[k + 1] = xn
        if override is None:
            wn = np.asarray(model.g(xs[k], ws[k]), dtype=float)
            if not np.all(np.isfinite(wn)):
                raise NonFinite(f"preview diverged at step {k}")
            ws[k + 1] = wn
        active.append(active_indices(problem.constraints, xs[k], us[k], ws[k]))
    return Trajectory(xs, us, ws, active, rolled_out=True)


def evaluate_cost(problem: OcpProblem, traj: Trajectory) -> float:
    """Summed stage cost over the horizon plus the terminal cost."""
    total = 0.0
    for k in range(traj.horizon):
        total += float(problem.cost.phi(traj.xs[k], traj.us[k], traj.ws[k]))
    total += float(problem.cost.psi(traj.xs[-1], traj.ws[-1]))
    return total


@dataclass
class StepData:
    """Per-step Jacobians and cost derivatives cached along one trajectory."""

    fx: list[Array]
    fu: list[Array]
    fw: list[Array]
    gx: list[Array]
    gw: list[Array]
    cx: list[Array]  # full constraint rows
    cu: list[Array]
    cw: list[Array]
    active: list[tuple[int, ...]]
    phix: list[Array]
    phiu: list[Array]
    phiw: list[Array]
    phixx: list[Array]
    phixu: list[Array]
    phixw: list[Array]
    phiuu: list[Array]
    phiuw: list[Array]
    phiww: list[Array]
    psix: Array
    psiw: Array
    psixx: Array
    psiww: Array

    def active_rows(self, k: int) -> tuple[Array, Array, Array]:
        idx = list(self.active[k])
        return self.cx[k][idx], self.cu[k][idx], self.cw[k][idx]

    def preview_stripped(self) -> "StepData":
        """Copy with preview couplings zeroed (state-only baseline gains)."""
        zero = lambda mats: [np.zeros_like(m) for m in mats]
        return replace(
            self,
            fw=zero(self.fw),
            gx=zero(self.gx),
            gw=zero(self.gw),
            cw=zero(self.cw),
        )


def linearize(problem: OcpProblem, traj: Trajectory) -> StepData:
    """Evaluate all first derivatives and cost Hessian blocks along a trajectory."""
    model, cons, cost = problem.model, problem.constraints, problem.cost
    data = StepData(
        fx=[], fu=[], fw=[], gx=[], gw=[], cx=[], cu=[], cw=[],
        active=list(traj.active),
        phix=[], phiu=[], phiw=[],
        phixx=[], phixu=[], phixw=[], phiuu=[], phiuw=[], phiww=[],
        psix=cost.terminal_grad_x(traj.xs[-1], traj.ws[-1]),
        psiw=cost.terminal_grad_w(traj.xs[-1], traj.ws[-1]),
        psixx=cost.terminal_hess_xx(traj.xs[-1], traj.ws[-1]),
        psiww=cost.terminal_hess_ww(traj.xs[-1], traj.ws[-1]),
    )
    for k in range(traj.horizon):
        x, u, w = traj.xs[k], traj.us[k], traj.ws[k]
        data.fx.append(model.fx(x, u, w))
        data.fu.append(model.fu(x, u, w))
        data.fw.append(model.fw(x, u, w))
        data.gx.append(model.gx(x, w))
        data.gw.append(model.gw(x, w))
        data.cx.append(cons.cx(x, u, w))
        data.cu.append(cons.cu(x, u, w))
        data.cw.append(cons.cw(x, u, w))
        data.phix.append(cost.grad_x(x, u, w))
        data.phiu.append(cost.grad_u(x, u, w))
        data.phiw.append(cost.grad_w(x, u, w))
        data.phixx.append(cost.hess_xx(x, u, w))
        data.phixu.append(cost.hess_xu(x, u, w))
        data.phixw.append(cost.hess_xw(x, u, w))
        data.phiuu.append(cost.hess_uu(x, u, w))
        data.phiuw.append(cost.hess_uw(x, u, w))
        data.phiww.append(cost.hess_ww(x, u, w))
    return data


@dataclass
class KktReport:
    """Stationarity, complementarity, and feasibility residuals along a trajectory."""

    hu: Array  # (N, m) stationarity residuals
    stationarity_inf: Array  # (N,)
    complementarity: Array  # (N,)
    feasibility: Array  # (N,) max(0, max_i C_i)
    mu_min: float

    @property
    def kkt_norm(self) -> float:
        return float(np.max(self.stationarity_inf)) if self.stationarity_inf.size else 0.0

    @property
    def max_violation(self) -> float:
        return float(np.max(self.feasibility)) if self.feasibility.size else 0.0


def kkt_residual(problem: OcpProblem, traj: Trajectory, costates) -> KktReport:
    """Evaluate the first-order optimality residuals for given costates."""
    big_n = traj.horizon
    m = problem.model.m
    hu = np.zeros((big_n, m))
    stat = np.zeros(big_n)
    compl = np.zeros(big_n)
    feas = np.zeros(big_n)
    mu_min = np.inf
    for k in range(big_n):
        x, u, w = traj.xs[k], traj.us[k], traj.ws[k]
        grad_u = problem.cost.grad_u(x, u, w) + problem.model.fu(x, u, w).T @ costates.lam[k + 1]
        idx = list(traj.active[k])
        if idx:
            cu_act = problem.constraints.cu(x, u, w)[idx]
            grad_u = grad_u + cu_act.T @ costates.mu[k]
        hu[k] = grad_u
        stat[k] = float(np.max(np.abs(grad_u))) if grad_u.size else 0.0
        if problem.constraints.l:
            cvals = np.asarray(problem.constraints.c(x, u, w), dtype=float)
            feas[k] = max(0.0, float(np.max(cvals)))
            if idx:
                compl[k] = float(np.max(np.abs(costates.mu[k] * cvals[idx])))
                mu_min = min(mu_min, float(np.min(costates.mu[k])))
    return KktReport(hu, stat, compl, feas, float(mu_min))


@dataclass
class NominalSolution:
    """A solved (or partially solved) horizon problem around which to adapt."""

    trajectory: Trajectory
    costates: object
    kkt_norm: float
    is_optimal: bool
    cost: float
    iterations: int = 0
    report: Optional[KktReport] = None


def _clamp_controls(problem: OcpProblem, us: Array) -> Array:
    box = problem.constraints.control_box
    if box is None:
        return us
    lower, upper = box
    return np.clip(us, lower, upper)


@dataclass
class _Iterate:
    traj: Trajectory
    costates: object
    report: KktReport
    cost: float


def _evaluate_iterate(problem: OcpProblem, traj: Trajectory) -> _Iterate:
    from .costates import backward_costates

    costates = backward_costates(problem, traj)
    report = kkt_residual(problem, traj, costates)
    return _Iterate(traj, costates, report, evaluate_cost(problem, traj))


def _release_negative_multipliers(traj: Trajectory, costates, drop_tol: float = 1e-9) -> Trajectory:
    """Release the most negative-multiplier constraint per step (one flip each)."""
    changed = False
    new_active: list[tuple[int, ...]] = []
    for k, idx in enumerate(traj.active):
        if idx and costates.mu[k].size and float(np.min(costates.mu[k])) < -drop_tol:
            local = int(np.argmin(costates.mu[k]))
            keep = tuple(i for j, i in enumerate(idx) if j != local)
            new_active.append(keep)
            changed = True
        else:
            new_active.append(idx)
    if not changed:
        return traj
    out = traj.copy()
    out.active = new_active
    return out


def solve_nominal(
    problem: OcpProblem,
    max_iters: int = 200,
    opt_tol: float = 1e-6,
    init_controls: Optional[Array] = None,
) -> NominalSolution:
    """Solve the horizon problem by iterating the second-variation correction.

    Each iteration linearizes around the current rollout, builds the
    non-optimal-mode gain schedule, applies the Newton correction with
    feedback in a clamped forward pass, and backtracks on the total cost
    (Armijo coefficient 1e-4).  Raises SolveFailed when the budget is
    exhausted with the stationarity norm above ``opt_tol``.
    """
    from .costates import backward_costates  # deferred to avoid import cycle
    from .ene import hamiltonian_blocks, riccati_backward, simulate_delta
    from .errors import ZuuNotPositive

    big_n, m = problem.horizon, problem.model.m
    if init_controls is None:
        us = np.zeros((big_n, m))
    else:
        us = _clamp_controls(problem, np.asarray(init_controls, dtype=float).reshape(big_n, m))
    cur = _evaluate_iterate(problem, rollout(problem, us))
    best = cur

    def finish(it: _Iterate, iterations: int) -> NominalSolution:
        is_opt = bool(
            it.report.kkt_norm <= opt_tol
            and it.report.max_violation <= problem.constraints.activation_tol
            and (not np.isfinite(it.report.mu_min) or it.report.mu_min >= -1e-9)
        )
        return NominalSolution(it.traj, it.costates, it.report.kkt_norm, is_opt, it.cost, iterations, it.report)

    if max_iters == 0:
        return finish(cur, 0)

    reg = 0.0
    reg_init, reg_max = 1e-6, 1e10
    for iteration in range(max_iters):
        sol = finish(cur, iteration)
        if sol.is_optimal:
            return sol

        released = _release_negative_multipliers(cur.traj, cur.costates)
        if released is not cur.traj:
            costates = backward_costates(problem, released)
            cur = _Iterate(released, costates, kkt_residual(problem, released, costates), cur.cost)

        data = linearize(problem, cur.traj)
        blocks = hamiltonian_blocks(problem, cur.traj, cur.costates, data)
        hu = _stationarity_from(data, cur.costates)

        accepted = None
        while accepted is None and reg <= reg_max:
            try:
                gains = riccati_backward(blocks, data, mode="nonoptimal", hu=hu, quu_shift=reg)
            except ZuuNotPositive:
                reg = reg_init if reg == 0.0 else 10.0 * reg
                continue
            delta = simulate_delta(
                gains, data, np.zeros(problem.model.n), np.zeros(problem.model.n_w), corrections=True
            )
            directional = float(np.sum(hu * delta.du))
            for eta in [2.0 ** (-i) for i in range(11)]:
                trial = _forward_pass(problem, cur.traj, gains, eta)
                if trial is None:
                    continue
                trial_cost = evaluate_cost(problem, trial)
                armijo = cur.cost + 1e-4 * eta * directional
                # Near the optimum the predicted decrease sinks below the
                # floating point resolution of the total cost; accept the full
                # step there.
                tiny_model = abs(directional) <= 1e-9 * (1.0 + abs(cur.cost))
                if trial_cost <= armijo or (tiny_model and eta == 1.0):
                    accepted = trial
                    break
            if accepted is None:
                # No cost decrease along this direction: stiffen the model.
                new_reg = reg_init if reg == 0.0 else 10.0 * reg
                if new_reg > reg_max:
                    break
                reg = new_reg
        if accepted is None:
            break

        reg = 0.0 if reg <= reg_init else reg / 5.0
        cur = _evaluate_iterate(problem, accepted)
        if cur.report.kkt_norm < best.report.kkt_norm:
            best = cur

    sol = finish(cur, max_iters)
    if sol.is_optimal:
        return sol
    best_norm = min(best.report.kkt_norm, cur.report.kkt_norm)
    raise SolveFailed(best_norm, best=finish(best, max_iters))


def _stationarity_from(data: StepData, costates) -> Array:
    big_n = len(data.fu)
    hu = np.zeros((big_n, data.fu[0].shape[1]))
    for k in range(big_n):
        grad = data.phiu[k] + data.fu[k].T @ costates.lam[k + 1]
        idx = list(data.active[k])
        if idx:
            grad = grad + data.cu[k][idx].T @ costates.mu[k]
        hu[k] = grad
    return hu


def _forward_pass(problem: OcpProblem, ref: Trajectory, gains, eta: float) -> Optional[Trajectory]:
    """Roll the plant under feedback around ``ref`` with step fraction ``eta``."""
    model = problem.model
    big_n = ref.horizon
    xs = np.zeros_like(ref.xs)
    ws = np.zeros_like(ref.ws)
    us = np.zeros_like(ref.us)
    xs[0] = problem.x0
    ws[0] = problem.w0
    for k in range(big_n):
        dx = xs[k] - ref.xs[k]
        dw = ws[k] - ref.ws[k]
        du = eta * gains.u_corr[k] + gains.k_x[k] @ dx + gains.k_w[k] @ dw
        us[k] = ref.us[k] + du
        us[k : k + 1] = _clamp_controls(problem, us[k : k + 1])
        xn = np.asarray(model.f(xs[k], us[k], ws[k]), dtype=float)
        if not np.all(np.isfinite(xn)) or float(np.max(np.abs(xn))) > _DIVERGENCE_NORM:
            return None
        xs[k + 1] = xn
        ws[k + 1] = np.asarray(model.g(xs[k], ws[k]), dtype=float)
    active = [active_indices(problem.constraints, xs[k], us[k], ws[k]) for k in range(big_n)]
    return Trajectory(xs, us, ws, active, rolled_out=True)
