"""Second-variation machinery: curvature blocks, gain recursion, feedback policy.

The backward recursion factors the quadratic expansion of the augmented cost
around a nominal trajectory into per-step feedback gains.  The value-function
perturbation is carried in the form

    dlam(k)    = vxx(k) dx(k) + vxw(k) dw(k) + t_x(k)
    dlam_bar(k)= vwx(k) dx(k) + vww(k) dw(k) + t_w(k)

where the affine drifts t_x, t_w vanish identically when the nominal is
stationary and otherwise propagate the stationarity residual backwards.
Per step the action-value ("q") blocks combine the Hamiltonian curvature with
the propagated value blocks, and the control/multiplier pair solves a small
KKT system whose inverse is kept for the gain assembly:

    [du; dmu] = -kkt_inv [q_ux dx + q_uw dw + f_u^T t_x(k+1) + r_u; C_x^a dx + C_w^a dw]

with r_u the stationarity residual at that step.  Feedback gains on state and
preview perturbations fall out of the top rows; multiplier sensitivities from
the bottom rows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .costates import CostateTrajectory
from .errors import SingularKkt, SingularMatrix, ZuuNotPositive
from .numerics import is_positive_definite, solve_symmetric_indefinite
from .ocp import OcpProblem, StepData, Trajectory, linearize

Array = np.ndarray


@dataclass
class HamiltonianBlocks:
    """Second derivatives of the stage Hamiltonian at each step: cost Hessians
    plus costate-weighted curvature of the dynamics, preview model, and active
    constraints.  Only the upper orientation is stored; the full 3x3 block
    matrix is symmetric by construction."""

    hxx: list[Array]
    hxu: list[Array]
    hxw: list[Array]
    huu: list[Array]
    huw: list[Array]
    hww: list[Array]

    def preview_stripped(self) -> "HamiltonianBlocks":
        return HamiltonianBlocks(
            hxx=[b.copy() for b in self.hxx],
            hxu=[b.copy() for b in self.hxu],
            hxw=[np.zeros_like(b) for b in self.hxw],
            huu=[b.copy() for b in self.huu],
            huw=[np.zeros_like(b) for b in self.huw],
            hww=[np.zeros_like(b) for b in self.hww],
        )


def hamiltonian_blocks(
    problem: OcpProblem,
    traj: Trajectory,
    costates: CostateTrajectory,
    data: Optional[StepData] = None,
) -> HamiltonianBlocks:
    """Assemble the per-step curvature of the stage Hamiltonian.

    For affine-declared maps the weighted contractions are skipped exactly, so
    the blocks reduce to the raw cost Hessians.
    """
    if data is None:
        data = linearize(problem, traj)
    model, cons = problem.model, problem.constraints
    n, m = model.n, model.m
    blocks = HamiltonianBlocks([], [], [], [], [], [])
    for k in range(traj.horizon):
        x, u, w = traj.xs[k], traj.us[k], traj.ws[k]
        hxx = data.phixx[k].copy()
        hxu = data.phixu[k].copy()
        hxw = data.phixw[k].copy()
        huu = data.phiuu[k].copy()
        huw = data.phiuw[k].copy()
        hww = data.phiww[k].copy()
        if not model.f_affine:
            hf = model.f_hessian_contraction(x, u, w, costates.lam[k + 1])
            hxx += hf[:n, :n]
            hxu += hf[:n, n : n + m]
            hxw += hf[:n, n + m :]
            huu += hf[n : n + m, n : n + m]
            huw += hf[n : n + m, n + m :]
            hww += hf[n + m :, n + m :]
        if not model.g_affine:
            hg = model.g_hessian_contraction(x, w, costates.lam_bar[k + 1])
            hxx += hg[:n, :n]
            hxw += hg[:n, n:]
            hww += hg[n:, n:]
        idx = list(traj.active[k])
        if idx and not cons.affine:
            hc = cons.hessian_contraction(x, u, w, costates.mu[k], idx)
            hxx += hc[:n, :n]
            hxu += hc[:n, n : n + m]
            hxw += hc[:n, n + m :]
            huu += hc[n : n + m, n : n + m]
            huw += hc[n : n + m, n + m :]
            hww += hc[n + m :, n + m :]
        blocks.hxx.append(hxx)
        blocks.hxu.append(hxu)
        blocks.hxw.append(hxw)
        blocks.huu.append(huu)
        blocks.huw.append(huw)
        blocks.hww.append(hww)
    return blocks


def kkt_inverse(z_uu: Array, c_u_active: Array, step: Optional[int] = None) -> Array:
    """Inverse of the per-step control/multiplier KKT block.

    Active branch: inv([[z_uu, C_u^a^T], [C_u^a, 0]]).  With no active rows
    the multiplier block has zero dimension and this is just inv(z_uu).
    Raises SingularKkt when the block is singular (duplicate or rank-deficient
    active rows).
    """
    m = z_uu.shape[0]
    la = c_u_active.shape[0]
    kkt = np.zeros((m + la, m + la))
    kkt[:m, :m] = z_uu
    if la:
        kkt[:m, m:] = c_u_active.T
        kkt[m:, :m] = c_u_active
    try:
        return solve_symmetric_indefinite(kkt, np.eye(m + la))
    except SingularMatrix as exc:
        raise SingularKkt(step) from exc


@dataclass
class GainSchedule:
    """Per-step feedback gains and value blocks produced by the backward pass.

    k_x, k_w: control feedback on state / preview perturbations.
    k_corr:   top rows of -kkt_inv; maps a stationarity correction into du.
    k_mu_x, k_mu_w: multiplier sensitivity to state / preview perturbations.
    u_corr:   precomputed correction k_corr @ [f_u^T t_x(k+1) + r_u; 0]
              (zero in optimal mode).
    vxx/vxw/vwx/vww: value-function curvature; t_x/t_w the affine drifts.
    q**: action-value blocks kept for introspection and reuse.
    """

    k_x: Array  # (N, m, n)
    k_w: Array  # (N, m, n_w)
    k_corr: list[Array]  # (m, m + l_active)
    k_mu_x: list[Array]
    k_mu_w: list[Array]
    kkt_inv: list[Array]
    u_corr: Array  # (N, m)
    vxx: Array  # (N+1, n, n)
    vxw: Array
    vwx: Array
    vww: Array
    t_x: Array  # (N+1, n)
    t_w: Array  # (N+1, n_w)
    qxx: list[Array]
    qxu: list[Array]
    qxw: list[Array]
    qux: list[Array]
    quu: list[Array]
    quw: list[Array]
    qwx: list[Array]
    qwu: list[Array]
    qww: list[Array]
    fu: list[Array]
    hu: Array  # (N, m) stationarity residuals used by the recursion
    active: list[tuple[int, ...]]
    mode: str = "optimal"
    stripped: bool = False

    @property
    def horizon(self) -> int:
        return self.k_x.shape[0]


def riccati_backward(
    blocks: HamiltonianBlocks,
    data: StepData,
    mode: str = "optimal",
    hu: Optional[Array] = None,
    quu_shift: float = 0.0,
) -> GainSchedule:
    """Backward sweep k = N-1 .. 0 producing the gain schedule.

    mode "optimal": the affine drifts are identically zero (stationary
    nominal).  mode "nonoptimal": the drifts propagate the supplied
    stationarity residuals ``hu`` and each step gains a feedforward
    correction.  Raises ZuuNotPositive / SingularKkt per step; no
    regularization is ever applied silently.  ``quu_shift`` adds an explicit
    Levenberg-style diagonal shift to the control curvature before the
    positivity check; the nominal solver uses it to globalize its search
    direction, adaptation callers leave it at zero.
    """
    if mode not in ("optimal", "nonoptimal"):
        raise ValueError(f"unknown mode {mode!r}")
    big_n = len(data.fx)
    n = data.fx[0].shape[0]
    m = data.fu[0].shape[1]
    n_w = data.gw[0].shape[0]
    if mode == "nonoptimal":
        hu = np.zeros((big_n, m)) if hu is None else np.asarray(hu, dtype=float)
    else:
        hu = np.zeros((big_n, m))

    gs = GainSchedule(
        k_x=np.zeros((big_n, m, n)),
        k_w=np.zeros((big_n, m, n_w)),
        k_corr=[None] * big_n,
        k_mu_x=[None] * big_n,
        k_mu_w=[None] * big_n,
        kkt_inv=[None] * big_n,
        u_corr=np.zeros((big_n, m)),
        vxx=np.zeros((big_n + 1, n, n)),
        vxw=np.zeros((big_n + 1, n, n_w)),
        vwx=np.zeros((big_n + 1, n_w, n)),
        vww=np.zeros((big_n + 1, n_w, n_w)),
        t_x=np.zeros((big_n + 1, n)),
        t_w=np.zeros((big_n + 1, n_w)),
        qxx=[None] * big_n, qxu=[None] * big_n, qxw=[None] * big_n,
        qux=[None] * big_n, quu=[None] * big_n, quw=[None] * big_n,
        qwx=[None] * big_n, qwu=[None] * big_n, qww=[None] * big_n,
        fu=[f.copy() for f in data.fu],
        hu=hu.copy(),
        active=list(data.active),
        mode=mode,
    )
    gs.vxx[big_n] = data.psixx
    gs.vww[big_n] = data.psiww

    for k in range(big_n - 1, -1, -1):
        fx, fu, fw = data.fx[k], data.fu[k], data.fw[k]
        gx, gw = data.gx[k], data.gw[k]
        s1, w1 = gs.vxx[k + 1], gs.vxw[k + 1]
        sb1, wb1 = gs.vwx[k + 1], gs.vww[k + 1]

        qux = blocks.hxu[k].T + fu.T @ s1 @ fx + fu.T @ w1 @ gx
        quu = blocks.huu[k] + fu.T @ s1 @ fu
        if quu_shift:
            quu = quu + quu_shift * np.eye(m)
        quw = blocks.huw[k] + fu.T @ s1 @ fw + fu.T @ w1 @ gw
        qxx = blocks.hxx[k] + fx.T @ s1 @ fx + fx.T @ w1 @ gx + gx.T @ sb1 @ fx + gx.T @ wb1 @ gx
        qxu = blocks.hxu[k] + fx.T @ s1 @ fu + gx.T @ sb1 @ fu
        qxw = blocks.hxw[k] + fx.T @ s1 @ fw + fx.T @ w1 @ gw + gx.T @ sb1 @ fw + gx.T @ wb1 @ gw
        qwx = blocks.hxw[k].T + fw.T @ s1 @ fx + fw.T @ w1 @ gx + gw.T @ sb1 @ fx + gw.T @ wb1 @ gx
        qwu = blocks.huw[k].T + fw.T @ s1 @ fu + gw.T @ sb1 @ fu
        qww = blocks.hww[k] + fw.T @ s1 @ fw + fw.T @ w1 @ gw + gw.T @ sb1 @ fw + gw.T @ wb1 @ gw

        if not is_positive_definite(0.5 * (quu + quu.T)):
            raise ZuuNotPositive(k)

        idx = list(data.active[k])
        cax, cau, caw = data.active_rows(k)
        la = len(idx)
        kinv = kkt_inverse(quu, cau, step=k)

        stack_x = np.vstack([qux, cax]) if la else qux
        stack_w = np.vstack([quw, caw]) if la else quw
        full_x = kinv @ stack_x  # (m+la, n)
        full_w = kinv @ stack_w
        gs.k_x[k] = -full_x[:m]
        gs.k_w[k] = -full_w[:m]
        gs.k_mu_x[k] = -full_x[m:]
        gs.k_mu_w[k] = -full_w[m:]
        gs.k_corr[k] = -kinv[:m]
        gs.kkt_inv[k] = kinv

        bracket_x = np.hstack([qxu, cax.T]) if la else qxu  # (n, m+la)
        bracket_w = np.hstack([qwu, caw.T]) if la else qwu  # (n_w, m+la)
        sxu = bracket_x @ kinv
        swu = bracket_w @ kinv
        gs.vxx[k] = qxx - sxu @ stack_x
        gs.vxw[k] = qxw - sxu @ stack_w
        gs.vwx[k] = qwx - swu @ stack_x
        gs.vww[k] = qww - swu @ stack_w

        if mode == "nonoptimal":
            corr = fu.T @ gs.t_x[k + 1] + hu[k]
            pad = np.concatenate([corr, np.zeros(la)])
            gs.t_x[k] = fx.T @ gs.t_x[k + 1] + gx.T @ gs.t_w[k + 1] - sxu @ pad
            gs.t_w[k] = fw.T @ gs.t_x[k + 1] + gw.T @ gs.t_w[k + 1] - swu @ pad
            gs.u_corr[k] = gs.k_corr[k] @ pad

        gs.qxx[k], gs.qxu[k], gs.qxw[k] = qxx, qxu, qxw
        gs.qux[k], gs.quu[k], gs.quw[k] = qux, quu, quw
        gs.qwx[k], gs.qwu[k], gs.qww[k] = qwx, qwu, qww

    return gs


@dataclass(frozen=True)
class PerturbationState:
    """State and preview deviation from the nominal at one step."""

    dx: Array
    dw: Array


def ene_control(gains: GainSchedule, k: int, pert: PerturbationState, state_only: bool = False) -> Array:
    """Feedback correction du = K_x dx + K_w dw.

    ``state_only`` drops the preview channel at application time (the
    state-only baseline additionally builds its gains from preview-stripped
    couplings; see the sim module).
    """
    du = gains.k_x[k] @ pert.dx
    if not state_only:
        du = du + gains.k_w[k] @ pert.dw
    return du


@dataclass
class DeltaTrajectory:
    """Linearized closed-loop perturbation propagation under a gain schedule."""

    dx: Array  # (N+1, n)
    du: Array  # (N, m)
    dw: Array  # (N+1, n_w)
    dmu: list[Array]
    dc: Array  # (N, l) predicted constraint perturbations (full rows)


def simulate_delta(
    gains: GainSchedule,
    data: StepData,
    dx0: Array,
    dw0: Array,
    corrections: bool = False,
    state_only: bool = False,
) -> DeltaTrajectory:
    """Propagate the perturbation dynamics under the feedback policy.

    Multiplier perturbations follow the pure feedback law (no correction
    term); constraint perturbations are predicted for all rows from the full
    constraint Jacobians carried by ``data``.
    """
    big_n = gains.horizon
    n = data.fx[0].shape[0]
    n_w = data.gw[0].shape[0]
    m = data.fu[0].shape[1]
    l = data.cx[0].shape[0] if data.cx else 0
    dx = np.zeros((big_n + 1, n))
    dw = np.zeros((big_n + 1, n_w))
    du = np.zeros((big_n, m))
    dc = np.zeros((big_n, l))
    dmu: list[Array] = []
    dx[0] = np.asarray(dx0, dtype=float)
    dw[0] = np.asarray(dw0, dtype=float)
    for k in range(big_n):
        pert = PerturbationState(dx[k], dw[k])
        step_du = ene_control(gains, k, pert, state_only=state_only)
        if corrections:
            step_du = step_du + gains.u_corr[k]
        du[k] = step_du
        dmu_k = gains.k_mu_x[k] @ dx[k]
        if not state_only:
            dmu_k = dmu_k + gains.k_mu_w[k] @ dw[k]
        dmu.append(dmu_k)
        if l:
            dc[k] = data.cx[k] @ dx[k] + data.cu[k] @ du[k] + data.cw[k] @ dw[k]
        dx[k + 1] = data.fx[k] @ dx[k] + data.fu[k] @ du[k] + data.fw[k] @ dw[k]
        dw[k + 1] = data.gx[k] @ dx[k] + data.gw[k] @ dw[k]
    return DeltaTrajectory(dx, du, dw, dmu, dc)
