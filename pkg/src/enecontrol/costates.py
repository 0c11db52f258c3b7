"""Backward computation of the Lagrange multipliers along a trajectory.

Orientation convention: every gradient is stored as a 1-D array (column
semantics), so the state multiplier recursion reads

    lam(k) = phi_x^T + f_x^T lam(k+1) + g_x^T lambar(k+1) + C_x^a^T mu(k)

with terminal values lam(N) = psi_x and lambar(N) = psi_w.  The active
multiplier mu(k) is recovered from the control stationarity line through the
Gram system (C_u^a C_u^a^T) mu = -C_u^a (phi_u^T + f_u^T lam(k+1)); the
residual of that line is stored because non-optimal nominals need it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonFinite, RankDeficientActiveSet, SingularMatrix
from .numerics import solve_symmetric_indefinite
from .ocp import OcpProblem, StepData, Trajectory, linearize

Array = np.ndarray


@dataclass
class CostateTrajectory:
    """Multipliers for dynamics (lam), preview model (lam_bar), and active
    constraints (mu, empty at inactive steps), plus the per-step control
    stationarity residual."""

    lam: Array  # (N+1, n)
    lam_bar: Array  # (N+1, n_w)
    mu: list[Array]  # per step, shape (l_active,)
    stationarity: Array  # (N, m) residual of the control stationarity line

    @property
    def kkt_norm(self) -> float:
        return float(np.max(np.abs(self.stationarity))) if self.stationarity.size else 0.0


def backward_costates(problem: OcpProblem, traj: Trajectory, data: Optional[StepData] = None) -> CostateTrajectory:
    """Sweep k = N-1 .. 0 computing mu, lam, lam_bar for the trajectory's
    active sets.  Raises RankDeficientActiveSet when the active control
    Jacobian loses row rank (the singular-K case)."""
    if data is None:
        data = linearize(problem, traj)
    big_n = traj.horizon
    n, m, n_w = problem.model.n, problem.model.m, problem.model.n_w

    lam = np.zeros((big_n + 1, n))
    lam_bar = np.zeros((big_n + 1, n_w))
    mu: list[Array] = [np.zeros(0)] * big_n
    hu = np.zeros((big_n, m))

    lam[big_n] = data.psix
    lam_bar[big_n] = data.psiw

    for k in range(big_n - 1, -1, -1):
        grad_u = data.phiu[k] + data.fu[k].T @ lam[k + 1]
        idx = list(data.active[k])
        if idx:
            cax, cau, caw = data.active_rows(k)
            gram = cau @ cau.T
            try:
                mu_k = -solve_symmetric_indefinite(gram, cau @ grad_u)
            except SingularMatrix as exc:
                raise RankDeficientActiveSet(f"active control Jacobian rank deficient at step {k}") from exc
            mu[k] = mu_k
            hu[k] = grad_u + cau.T @ mu_k
            lam[k] = data.phix[k] + data.fx[k].T @ lam[k + 1] + data.gx[k].T @ lam_bar[k + 1] + cax.T @ mu_k
            lam_bar[k] = data.phiw[k] + data.fw[k].T @ lam[k + 1] + data.gw[k].T @ lam_bar[k + 1] + caw.T @ mu_k
        else:
            hu[k] = grad_u
            lam[k] = data.phix[k] + data.fx[k].T @ lam[k + 1] + data.gx[k].T @ lam_bar[k + 1]
            lam_bar[k] = data.phiw[k] + data.fw[k].T @ lam[k + 1] + data.gw[k].T @ lam_bar[k + 1]
        if not (np.all(np.isfinite(lam[k])) and np.all(np.isfinite(lam_bar[k]))):
            raise NonFinite(f"costate overflow at step {k}")

    return CostateTrajectory(lam, lam_bar, mu, hu)
