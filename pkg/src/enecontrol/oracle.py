"""Independent brute-force solvers used to validate the recursive machinery.

These deliberately share no code path with the backward recursions beyond the
model derivative suppliers: the perturbation QP is assembled as one dense
symmetric-indefinite KKT system and solved in a single factorization, and the
finite-horizon regulator is the textbook Riccati iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .costates import CostateTrajectory
from .ene import hamiltonian_blocks
from .numerics import solve_symmetric_indefinite
from .ocp import OcpProblem, StepData, Trajectory, linearize

Array = np.ndarray


@dataclass
class StackedQpSolution:
    """Minimizer and multipliers of the dense perturbation QP."""

    dx: Array  # (N+1, n)
    du: Array  # (N, m)
    dw: Array  # (N+1, n_w)
    dlam: Array  # (N+1, n)
    dlam_bar: Array  # (N+1, n_w)
    dmu: list[Array]
    objective: float
    hessian: Array
    linear: Array
    equality: Array
    rhs: Array
    solution: Array


def solve_stacked_qp(
    problem: OcpProblem,
    traj: Trajectory,
    costates: CostateTrajectory,
    active: Sequence[tuple[int, ...]],
    dx0: Array,
    dw0: Array,
    hu_term: Optional[Array] = None,
    data: Optional[StepData] = None,
) -> StackedQpSolution:
    """Solve the equality-constrained perturbation QP as one dense KKT system.

    Decision vector z = [dx(0..N); du(0..N-1); dw(0..N)].  The objective is
    the second-order expansion of the augmented cost (with optional linear
    stationarity term ``hu_term`` on the controls); equalities are the
    linearized dynamics, the linearized preview model, the active-constraint
    rows, and the initial conditions.
    """
    if data is None:
        data = linearize(problem, traj)
    blocks = hamiltonian_blocks(problem, traj, costates, data)
    big_n = traj.horizon
    n, m, n_w = problem.model.n, problem.model.m, problem.model.n_w

    nx = (big_n + 1) * n
    nu = big_n * m
    nw = (big_n + 1) * n_w
    dim = nx + nu + nw

    def ix(k):
        return slice(k * n, (k + 1) * n)

    def iu(k):
        return slice(nx + k * m, nx + (k + 1) * m)

    def iw(k):
        return slice(nx + nu + k * n_w, nx + nu + (k + 1) * n_w)

    p = np.zeros((dim, dim))
    q = np.zeros(dim)
    for k in range(big_n):
        p[ix(k), ix(k)] += blocks.hxx[k]
        p[ix(k), iu(k)] += blocks.hxu[k]
        p[iu(k), ix(k)] += blocks.hxu[k].T
        p[ix(k), iw(k)] += blocks.hxw[k]
        p[iw(k), ix(k)] += blocks.hxw[k].T
        p[iu(k), iu(k)] += blocks.huu[k]
        p[iu(k), iw(k)] += blocks.huw[k]
        p[iw(k), iu(k)] += blocks.huw[k].T
        p[iw(k), iw(k)] += blocks.hww[k]
        if hu_term is not None:
            q[iu(k)] += hu_term[k]
    p[ix(big_n), ix(big_n)] += data.psixx
    p[iw(big_n), iw(big_n)] += data.psiww

    rows: list[Array] = []
    rhs: list[Array] = []

    def add_row(coeffs: list[tuple[slice, Array]], value: Array):
        row = np.zeros((value.size, dim))
        for sl, mat in coeffs:
            row[:, sl] += mat
        rows.append(row)
        rhs.append(value)

    add_row([(ix(0), np.eye(n))], np.asarray(dx0, dtype=float))
    add_row([(iw(0), np.eye(n_w))], np.asarray(dw0, dtype=float))
    dyn_start = len(rows)
    for k in range(big_n):
        add_row(
            [(ix(k + 1), np.eye(n)), (ix(k), -data.fx[k]), (iu(k), -data.fu[k]), (iw(k), -data.fw[k])],
            np.zeros(n),
        )
    prev_start = len(rows)
    for k in range(big_n):
        add_row([(iw(k + 1), np.eye(n_w)), (ix(k), -data.gx[k]), (iw(k), -data.gw[k])], np.zeros(n_w))
    con_index: list[tuple[int, int]] = []
    for k in range(big_n):
        idx = list(active[k])
        if idx:
            con_index.append((k, len(rows)))
            add_row(
                [(ix(k), data.cx[k][idx]), (iu(k), data.cu[k][idx]), (iw(k), data.cw[k][idx])],
                np.zeros(len(idx)),
            )

    a_mat = np.vstack([r for r in rows])
    b_vec = np.concatenate(rhs)
    n_eq = a_mat.shape[0]

    kkt = np.zeros((dim + n_eq, dim + n_eq))
    kkt[:dim, :dim] = p
    kkt[:dim, dim:] = a_mat.T
    kkt[dim:, :dim] = a_mat
    sol = solve_symmetric_indefinite(kkt, np.concatenate([-q, b_vec]))
    z = sol[:dim]
    nu_all = sol[dim:]

    dx = z[:nx].reshape(big_n + 1, n)
    du = z[nx : nx + nu].reshape(big_n, m)
    dw = z[nx + nu :].reshape(big_n + 1, n_w)

    # Multiplier bookkeeping: the stationarity rows read
    #   P z + q - f_u^T nu_dyn(k) + C_u^a^T nu_con(k) + ... = 0
    # so dlam(k+1) = -nu_dyn(k) and dmu(k) = nu_con(k); dlam(0) = -nu_x0.
    offsets = np.cumsum([0] + [r.shape[0] for r in rows])
    dlam = np.zeros((big_n + 1, n))
    dlam_bar = np.zeros((big_n + 1, n_w))
    dlam[0] = -nu_all[offsets[0] : offsets[0] + n]
    dlam_bar[0] = -nu_all[offsets[1] : offsets[1] + n_w]
    for k in range(big_n):
        r = dyn_start + k
        dlam[k + 1] = -nu_all[offsets[r] : offsets[r + 1]]
        r = prev_start + k
        dlam_bar[k + 1] = -nu_all[offsets[r] : offsets[r + 1]]
    dmu: list[Array] = [np.zeros(0)] * big_n
    for k, r in con_index:
        dmu[k] = nu_all[offsets[r] : offsets[r + 1]].copy()

    objective = 0.5 * float(z @ p @ z) + float(q @ z)
    return StackedQpSolution(dx, du, dw, dlam, dlam_bar, dmu, objective, p, q, a_mat, b_vec, z)


def discrete_lqr(a: Array, b: Array, q: Array, r: Array, qf: Array, horizon: int) -> tuple[list[Array], list[Array]]:
    """Finite-horizon regulator gains for x' = A x + B u with stage cost
    (x'Qx + u'Ru)/2 and terminal cost x'Qf x / 2.

    Returns (gains, values) with values[k] the cost-to-go Hessian and
    gains[k] defined so the optimal correction is du = -K(k) dx (the state
    feedback produced by the backward recursion equals -K(k)).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ps: list[Array] = [None] * (horizon + 1)
    ks: list[Array] = [None] * horizon
    ps[horizon] = np.asarray(qf, dtype=float)
    for k in range(horizon - 1, -1, -1):
        pn = ps[k + 1]
        gain = np.linalg.solve(r + b.T @ pn @ b, b.T @ pn @ a)
        ks[k] = gain
        ps[k] = q + a.T @ pn @ a - a.T @ pn @ b @ gain
    return ks, ps


def lq_adjoint_sweep(
    a: Array,
    b: Array,
    e: Array,
    g_mat: Array,
    h_mat: Array,
    q: Array,
    r: Array,
    qf: Array,
    xs: Array,
    us: Array,
    ws: Array,
    q_w: Optional[Array] = None,
    qf_w: Optional[Array] = None,
) -> tuple[Array, Array]:
    """Textbook adjoint recursion for an unconstrained linear-quadratic problem.

    Dynamics x' = A x + B u + E w, preview w' = G x + H w, stage cost
    (x'Qx + u'Ru + w'Q_w w)/2, terminal (x'Qf x + w'Qf_w w)/2.  Returns the
    multiplier sequences for the dynamics and the preview model.
    """
    big_n = us.shape[0]
    n = a.shape[0]
    n_w = h_mat.shape[0]
    q_w = np.zeros((n_w, n_w)) if q_w is None else q_w
    qf_w = np.zeros((n_w, n_w)) if qf_w is None else qf_w
    lam = np.zeros((big_n + 1, n))
    lam_bar = np.zeros((big_n + 1, n_w))
    lam[big_n] = qf @ xs[big_n]
    lam_bar[big_n] = qf_w @ ws[big_n]
    for k in range(big_n - 1, -1, -1):
        lam[k] = q @ xs[k] + a.T @ lam[k + 1] + g_mat.T @ lam_bar[k + 1]
        lam_bar[k] = q_w @ ws[k] + e.T @ lam[k + 1] + h_mat.T @ lam_bar[k + 1]
    return lam, lam_bar
