"""Plant, preview-model, constraint, and cost abstractions with derivatives.

A plant combines the state update x(k+1) = f(x(k), u(k), w(k)) with a nominal
preview model w(k+1) = g(x(k), w(k)).  Safety constraints C(x, u, w) <= 0 and
stage/terminal costs phi, psi complete a problem description.  First
derivatives may be supplied analytically or fall back to central differences;
second derivatives enter only through costate-weighted contractions (the
Hessian of v . f for a weight vector v), so no third-order tensors are stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import TooManyActive
from .numerics import FD_HESS_STEP, FD_STEP, fd_jacobian

Array = np.ndarray


def _fd_scalar_gradient(func: Callable[[np.ndarray], float], at: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty(at.size)
    for j in range(at.size):
        dz = np.zeros_like(at)
        dz[j] = step
        grad[j] = (float(func(at + dz)) - float(func(at - dz))) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class PlantModel:
    """Discrete-time plant x' = f(x, u, w) with nominal preview model w' = g(x, w).

    Derivative suppliers default to central differences with step ``fd_step``.
    ``batched`` marks f as accepting stacked (batch, dim) arguments, which the
    finite-difference paths exploit.  ``f_affine`` / ``g_affine`` declare all
    second derivatives of the map to be zero, so the Hessian contraction is
    skipped exactly.
    """

    n: int
    m: int
    n_w: int
    f: Callable[[Array, Array, Array], Array]
    g: Callable[[Array, Array], Array]
    f_x: Optional[Callable] = None
    f_u: Optional[Callable] = None
    f_w: Optional[Callable] = None
    g_x: Optional[Callable] = None
    g_w: Optional[Callable] = None
    f_affine: bool = False
    g_affine: bool = False
    batched: bool = False
    origin_fixed: bool = False
    fd_step: float = FD_STEP

    def _fd_block(self, fun, args: tuple, slot: int, dim_out: int) -> Array:
        """Finite-difference Jacobian of fun w.r.t. its ``slot``-th argument."""
        base = args[slot]
        if self.batched:
            h = self.fd_step
            k = base.size
            stack = [np.asarray(a, dtype=float) for a in args]
            reps = [np.repeat(a[None, :], 2 * k, axis=0) for a in stack]
            pert = reps[slot]
            for j in range(k):
                pert[2 * j, j] += h
                pert[2 * j + 1, j] -= h
            vals = np.asarray(fun(*reps), dtype=float)
            return ((vals[0::2] - vals[1::2]) / (2.0 * h)).T

        def call(z):
            new_args = list(args)
            new_args[slot] = z
            return fun(*new_args)

        return fd_jacobian(call, base, self.fd_step)

    def fx(self, x: Array, u: Array, w: Array) -> Array:
        if self.f_x is not None:
            return np.asarray(self.f_x(x, u, w), dtype=float)
        return self._fd_block(self.f, (x, u, w), 0, self.n)

    def fu(self, x: Array, u: Array, w: Array) -> Array:
        if self.f_u is not None:
            return np.asarray(self.f_u(x, u, w), dtype=float)
        return self._fd_block(self.f, (x, u, w), 1, self.n)

    def fw(self, x: Array, u: Array, w: Array) -> Array:
        if self.f_w is not None:
            return np.asarray(self.f_w(x, u, w), dtype=float)
        return self._fd_block(self.f, (x, u, w), 2, self.n)

    def gx(self, x: Array, w: Array) -> Array:
        if self.g_x is not None:
            return np.asarray(self.g_x(x, w), dtype=float)
        return self._fd_block(self.g, (x, w), 0, self.n_w)

    def gw(self, x: Array, w: Array) -> Array:
        if self.g_w is not None:
            return np.asarray(self.g_w(x, w), dtype=float)
        return self._fd_block(self.g, (x, w), 1, self.n_w)

    def f_hessian_contraction(self, x: Array, u: Array, w: Array, weight: Array) -> Array:
        """Hessian of weight . f over the stacked (x, u, w) coordinates."""
        dim = self.n + self.m + self.n_w
        if self.f_affine:
            return np.zeros((dim, dim))
        if self.batched and self.f_x is None and self.f_u is None and self.f_w is None:
            return self._batched_second_difference(x, u, w, weight)

        def grad(z: Array) -> Array:
            xs, us, ws = z[: self.n], z[self.n : self.n + self.m], z[self.n + self.m :]
            return np.concatenate(
                [self.fx(xs, us, ws).T @ weight, self.fu(xs, us, ws).T @ weight, self.fw(xs, us, ws).T @ weight]
            )

        hess = fd_jacobian(grad, np.concatenate([x, u, w]), FD_HESS_STEP)
        return 0.5 * (hess + hess.T)

    def _batched_second_difference(self, x: Array, u: Array, w: Array, weight: Array) -> Array:
        """Direct central second differences of weight . f in one stacked plant call."""
        h = FD_HESS_STEP
        dim = self.n + self.m + self.n_w
        z0 = np.concatenate([x, u, w])
        pairs = [(i, j) for i in range(dim) for j in range(i, dim)]
        points = np.repeat(z0[None, :], 4 * len(pairs), axis=0)
        for idx, (i, j) in enumerate(pairs):
            base = 4 * idx
            points[base + 0, i] += h
            points[base + 0, j] += h
            points[base + 1, i] += h
            points[base + 1, j] -= h
            points[base + 2, i] -= h
            points[base + 2, j] += h
            points[base + 3, i] -= h
            points[base + 3, j] -= h
        vals = np.asarray(
            self.f(points[:, : self.n], points[:, self.n : self.n + self.m], points[:, self.n + self.m :]),
            dtype=float,
        )
        scal = vals @ weight
        hess = np.zeros((dim, dim))
        for idx, (i, j) in enumerate(pairs):
            base = 4 * idx
            val = (scal[base] - scal[base + 1] - scal[base + 2] + scal[base + 3]) / (4.0 * h * h)
            hess[i, j] = val
            hess[j, i] = val
        return hess

    def g_hessian_contraction(self, x: Array, w: Array, weight: Array) -> Array:
        """Hessian of weight . g over the stacked (x, w) coordinates."""
        dim = self.n + self.n_w
        if self.g_affine:
            return np.zeros((dim, dim))

        def grad(z: Array) -> Array:
            xs, ws = z[: self.n], z[self.n :]
            return np.concatenate([self.gx(xs, ws).T @ weight, self.gw(xs, ws).T @ weight])

        hess = fd_jacobian(grad, np.concatenate([x, w]), FD_HESS_STEP)
        return 0.5 * (hess + hess.T)


@dataclass(frozen=True)
class ConstraintSet:
    """Pointwise safety constraints C(x, u, w) <= 0 with l rows.

    ``control_box`` records (lower, upper) bounds when the rows are exactly a
    control box; the nominal solver uses it to clamp forward passes.
    """

    l: int
    c: Callable[[Array, Array, Array], Array]
    c_x: Optional[Callable] = None
    c_u: Optional[Callable] = None
    c_w: Optional[Callable] = None
    affine: bool = False
    activation_tol: float = 1e-8
    control_box: Optional[tuple[Array, Array]] = None
    fd_step: float = FD_STEP

    @staticmethod
    def none() -> "ConstraintSet":
        return ConstraintSet(l=0, c=lambda x, u, w: np.zeros(0), affine=True)

    @staticmethod
    def box_on_controls(lower: Sequence[float], upper: Sequence[float], activation_tol: float = 1e-8) -> "ConstraintSet":
        """Rows [u_j - upper_j ...] then [lower_j - u_j ...], skipping infinite bounds."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        m = lower.size
        upper_rows = [j for j in range(m) if np.isfinite(upper[j])]
        lower_rows = [j for j in range(m) if np.isfinite(lower[j])]
        total = len(upper_rows) + len(lower_rows)
        jac_u = np.zeros((total, m))
        for i, j in enumerate(upper_rows):
            jac_u[i, j] = 1.0
        for i, j in enumerate(lower_rows):
            jac_u[len(upper_rows) + i, j] = -1.0

        def evaluate(x, u, w):
            vals = np.empty(total)
            for i, j in enumerate(upper_rows):
                vals[i] = u[j] - upper[j]
            for i, j in enumerate(lower_rows):
                vals[len(upper_rows) + i] = lower[j] - u[j]
            return vals

        return ConstraintSet(
            l=total,
            c=evaluate,
            c_x=lambda x, u, w: np.zeros((total, x.size)),
            c_u=lambda x, u, w: jac_u.copy(),
            c_w=lambda x, u, w: np.zeros((total, w.size)),
            affine=True,
            activation_tol=activation_tol,
            control_box=(lower, upper),
        )

    def cx(self, x: Array, u: Array, w: Array) -> Array:
        if self.l == 0:
            return np.zeros((0, x.size))
        if self.c_x is not None:
            return np.asarray(self.c_x(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.c(z, u, w), x, self.fd_step)

    def cu(self, x: Array, u: Array, w: Array) -> Array:
        if self.l == 0:
            return np.zeros((0, u.size))
        if self.c_u is not None:
            return np.asarray(self.c_u(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.c(x, z, w), u, self.fd_step)

    def cw(self, x: Array, u: Array, w: Array) -> Array:
        if self.l == 0:
            return np.zeros((0, w.size))
        if self.c_w is not None:
            return np.asarray(self.c_w(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.c(x, u, z), w, self.fd_step)

    def hessian_contraction(self, x: Array, u: Array, w: Array, weight: Array, rows: Sequence[int]) -> Array:
        """Hessian of sum_i weight_i C_rows[i] over stacked (x, u, w)."""
        dim = x.size + u.size + w.size
        if self.affine or len(rows) == 0:
            return np.zeros((dim, dim))
        rows = list(rows)
        n, m = x.size, u.size

        def grad(z: Array) -> Array:
            xs, us, ws = z[:n], z[n : n + m], z[n + m :]
            return np.concatenate(
                [
                    self.cx(xs, us, ws)[rows].T @ weight,
                    self.cu(xs, us, ws)[rows].T @ weight,
                    self.cw(xs, us, ws)[rows].T @ weight,
                ]
            )

        hess = fd_jacobian(grad, np.concatenate([x, u, w]), FD_HESS_STEP)
        return 0.5 * (hess + hess.T)


def active_indices(constraints: ConstraintSet, x: Array, u: Array, w: Array) -> tuple[int, ...]:
    """Indices i with C_i(x, u, w) >= -activation_tol.

    Raises TooManyActive when the set exceeds the control dimension, which
    would make the active Jacobian rank deficient.
    """
    if constraints.l == 0:
        return ()
    vals = np.asarray(constraints.c(x, u, w), dtype=float)
    idx = tuple(int(i) for i in np.nonzero(vals >= -constraints.activation_tol)[0])
    if len(idx) > u.size:
        raise TooManyActive(f"{len(idx)} active constraints with only {u.size} controls")
    return idx


@dataclass(frozen=True)
class CostSpec:
    """Stage cost phi(x, u, w) and terminal cost psi(x, w) with derivatives.

    Gradient and Hessian suppliers default to central differences of the
    function / gradient.  Hessian blocks are stored in one orientation
    (phi_xu has shape (n, m)); transposes are derived.
    """

    phi: Callable[[Array, Array, Array], float]
    psi: Callable[[Array, Array], float]
    phi_x: Optional[Callable] = None
    phi_u: Optional[Callable] = None
    phi_w: Optional[Callable] = None
    phi_xx: Optional[Callable] = None
    phi_xu: Optional[Callable] = None
    phi_xw: Optional[Callable] = None
    phi_uu: Optional[Callable] = None
    phi_uw: Optional[Callable] = None
    phi_ww: Optional[Callable] = None
    psi_x: Optional[Callable] = None
    psi_w: Optional[Callable] = None
    psi_xx: Optional[Callable] = None
    psi_ww: Optional[Callable] = None
    fd_step: float = FD_STEP

    @staticmethod
    def quadratic(q: Array, r: Array, qf: Array, q_w: Optional[Array] = None, qf_w: Optional[Array] = None) -> "CostSpec":
        """phi = (x'Qx + u'Ru + w'Q_w w)/2, psi = (x'Qf x + w'Qf_w w)/2."""
        q = np.asarray(q, dtype=float)
        r = np.asarray(r, dtype=float)
        qf = np.asarray(qf, dtype=float)
        n = q.shape[0]
        m = r.shape[0]
        q_w = np.zeros((0, 0)) if q_w is None else np.asarray(q_w, dtype=float)
        qf_w = np.zeros((0, 0)) if qf_w is None else np.asarray(qf_w, dtype=float)

        def wq(wvec, mat):
            return 0.5 * float(wvec @ mat @ wvec) if mat.size else 0.0

        return CostSpec(
            phi=lambda x, u, w: 0.5 * float(x @ q @ x) + 0.5 * float(u @ r @ u) + wq(w, q_w),
            psi=lambda x, w: 0.5 * float(x @ qf @ x) + wq(w, qf_w),
            phi_x=lambda x, u, w: q @ x,
            phi_u=lambda x, u, w: r @ u,
            phi_w=lambda x, u, w: (q_w @ w if q_w.size else np.zeros(w.size)),
            phi_xx=lambda x, u, w: q.copy(),
            phi_xu=lambda x, u, w: np.zeros((n, m)),
            phi_xw=lambda x, u, w: np.zeros((n, w.size)),
            phi_uu=lambda x, u, w: r.copy(),
            phi_uw=lambda x, u, w: np.zeros((m, w.size)),
            phi_ww=lambda x, u, w: (q_w.copy() if q_w.size else np.zeros((w.size, w.size))),
            psi_x=lambda x, w: qf @ x,
            psi_w=lambda x, w: (qf_w @ w if qf_w.size else np.zeros(w.size)),
            psi_xx=lambda x, w: qf.copy(),
            psi_ww=lambda x, w: (qf_w.copy() if qf_w.size else np.zeros((w.size, w.size))),
        )

    # -- stage gradients ---------------------------------------------------
    def grad_x(self, x, u, w):
        if self.phi_x is not None:
            return np.asarray(self.phi_x(x, u, w), dtype=float)
        return _fd_scalar_gradient(lambda z: self.phi(z, u, w), x, self.fd_step)

    def grad_u(self, x, u, w):
        if self.phi_u is not None:
            return np.asarray(self.phi_u(x, u, w), dtype=float)
        return _fd_scalar_gradient(lambda z: self.phi(x, z, w), u, self.fd_step)

    def grad_w(self, x, u, w):
        if self.phi_w is not None:
            return np.asarray(self.phi_w(x, u, w), dtype=float)
        return _fd_scalar_gradient(lambda z: self.phi(x, u, z), w, self.fd_step)

    # -- stage Hessian blocks ----------------------------------------------
    def hess_xx(self, x, u, w):
        if self.phi_xx is not None:
            return np.asarray(self.phi_xx(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.grad_x(z, u, w), x, FD_HESS_STEP)

    def hess_xu(self, x, u, w):
        if self.phi_xu is not None:
            return np.asarray(self.phi_xu(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.grad_x(x, z, w), u, FD_HESS_STEP)

    def hess_xw(self, x, u, w):
        if self.phi_xw is not None:
            return np.asarray(self.phi_xw(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.grad_x(x, u, z), w, FD_HESS_STEP)

    def hess_uu(self, x, u, w):
        if self.phi_uu is not None:
            return np.asarray(self.phi_uu(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.grad_u(x, z, w), u, FD_HESS_STEP)

    def hess_uw(self, x, u, w):
        if self.phi_uw is not None:
            return np.asarray(self.phi_uw(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.grad_u(x, u, z), w, FD_HESS_STEP)

    def hess_ww(self, x, u, w):
        if self.phi_ww is not None:
            return np.asarray(self.phi_ww(x, u, w), dtype=float)
        return fd_jacobian(lambda z: self.grad_w(x, u, z), w, FD_HESS_STEP)

    # -- terminal ------------------------------------------------------------
    def terminal_grad_x(self, x, w):
        if self.psi_x is not None:
            return np.asarray(self.psi_x(x, w), dtype=float)
        return _fd_scalar_gradient(lambda z: self.psi(z, w), x, self.fd_step)

    def terminal_grad_w(self, x, w):
        if self.psi_w is not None:
            return np.asarray(self.psi_w(x, w), dtype=float)
        return _fd_scalar_gradient(lambda z: self.psi(x, z), w, self.fd_step)

    def terminal_hess_xx(self, x, w):
        if self.psi_xx is not None:
            return np.asarray(self.psi_xx(x, w), dtype=float)
        return fd_jacobian(lambda z: self.terminal_grad_x(z, w), x, FD_HESS_STEP)

    def terminal_hess_ww(self, x, w):
        if self.psi_ww is not None:
            return np.asarray(self.psi_ww(x, w), dtype=float)
        return fd_jacobian(lambda z: self.terminal_grad_w(x, z), w, FD_HESS_STEP)


# -- preview signals ---------------------------------------------------------

_LCG_MULT = 6364136223846793005
_LCG_INC = 1442695040888963407
_LCG_MASK = (1 << 64) - 1


def lcg_uniforms(seed: int, count: int) -> np.ndarray:
    """Deterministic uniforms in [0, 1) from a 64-bit linear congruential generator.

    state_0 = seed; state_{j+1} = (6364136223846793005 * state_j
    + 1442695040888963407) mod 2^64; the k-th value is the top 53 bits of
    state_{k+1} divided by 2^53.  Pinned bit-exactly for reproducibility.
    """
    state = seed & _LCG_MASK
    vals = np.empty(count)
    for k in range(count):
        state = (_LCG_MULT * state + _LCG_INC) & _LCG_MASK
        vals[k] = (state >> 11) / float(1 << 53)
    return vals


@dataclass(frozen=True)
class PreviewSignal:
    """Source of the preview sequence seen by a rollout.

    source "model": evolve by the nominal preview model (no override).
    source "hold": hold the initial preview, realizing w(k+1) = w(k).
    source "generator": w(k) = (a sin(k) + b rand(k) + c) * pattern with
    rand from the pinned 64-bit LCG stream.
    """

    source: str = "model"
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    seed: int = 0
    pattern: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.source not in ("model", "hold", "generator"):
            raise ValueError(f"unknown preview source {self.source!r}")

    def scalar_sequence(self, count: int) -> np.ndarray:
        ks = np.arange(count)
        return self.a * np.sin(ks) + self.b * lcg_uniforms(self.seed, count) + self.c

    def sequence(self, count: int, n_w: int, w0: Optional[Array] = None) -> Optional[np.ndarray]:
        """Preview values for steps 0..count-1, or None when the model evolves it."""
        if self.source == "model":
            return None
        if self.source == "hold":
            if w0 is None:
                raise ValueError("hold preview needs an initial value")
            return np.repeat(np.asarray(w0, dtype=float)[None, :], count, axis=0)
        pattern = np.ones(n_w) if self.pattern is None else np.asarray(self.pattern, dtype=float)
        return np.outer(self.scalar_sequence(count), pattern)


# -- derivative verification --------------------------------------------------


@dataclass
class DerivativeCheck:
    name: str
    max_rel_err: float


@dataclass
class DerivativeReport:
    checks: list[DerivativeCheck] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(c.max_rel_err <= self.tol for c in self.checks)

    @property
    def worst(self) -> DerivativeCheck:
        return max(self.checks, key=lambda c: c.max_rel_err)

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        for c in sorted(self.checks, key=lambda c: -c.max_rel_err):
            lines.append(f"  {c.name:<10s} max rel err {c.max_rel_err:.3e}")
        return "\n".join(lines)


def _rel_err(supplied: Array, reference: Array) -> float:
    diff = float(np.max(np.abs(supplied - reference))) if supplied.size else 0.0
    scale = float(np.max(np.abs(reference))) if reference.size else 0.0
    return diff / scale if scale > 1e-12 else diff


def verify_derivatives(
    model: PlantModel,
    constraints: ConstraintSet,
    cost: CostSpec,
    probe_points: Sequence[tuple[Array, Array, Array]],
    tol: float = 1e-4,
    oracle_step: Optional[float] = None,
) -> DerivativeReport:
    """Compare every derivative supplier against central differences at probes.

    The oracle uses twice the model's own finite-difference step so that
    suppliers marked finite-difference are still exercised at a distinct step.
    """
    h = oracle_step if oracle_step is not None else 2.0 * model.fd_step
    worst: dict[str, float] = {}

    def record(name, supplied, reference):
        err = _rel_err(np.asarray(supplied, dtype=float), np.asarray(reference, dtype=float))
        worst[name] = max(worst.get(name, 0.0), err)

    for x, u, w in probe_points:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        record("f_x", model.fx(x, u, w), fd_jacobian(lambda z: model.f(z, u, w), x, h))
        record("f_u", model.fu(x, u, w), fd_jacobian(lambda z: model.f(x, z, w), u, h))
        record("f_w", model.fw(x, u, w), fd_jacobian(lambda z: model.f(x, u, z), w, h))
        record("g_x", model.gx(x, w), fd_jacobian(lambda z: model.g(z, w), x, h))
        record("g_w", model.gw(x, w), fd_jacobian(lambda z: model.g(x, z), w, h))
        if constraints.l > 0:
            record("c_x", constraints.cx(x, u, w), fd_jacobian(lambda z: constraints.c(z, u, w), x, h))
            record("c_u", constraints.cu(x, u, w), fd_jacobian(lambda z: constraints.c(x, z, w), u, h))
            record("c_w", constraints.cw(x, u, w), fd_jacobian(lambda z: constraints.c(x, u, z), w, h))
        record("phi_x", cost.grad_x(x, u, w), _fd_scalar_gradient(lambda z: cost.phi(z, u, w), x, h))
        record("phi_u", cost.grad_u(x, u, w), _fd_scalar_gradient(lambda z: cost.phi(x, z, w), u, h))
        record("phi_w", cost.grad_w(x, u, w), _fd_scalar_gradient(lambda z: cost.phi(x, u, z), w, h))
        record("psi_x", cost.terminal_grad_x(x, w), _fd_scalar_gradient(lambda z: cost.psi(z, w), x, h))
        record("psi_w", cost.terminal_grad_w(x, w), _fd_scalar_gradient(lambda z: cost.psi(x, z), w, h))
        record("phi_xx", cost.hess_xx(x, u, w), fd_jacobian(lambda z: cost.grad_x(z, u, w), x, h))
        record("phi_xu", cost.hess_xu(x, u, w), fd_jacobian(lambda z: cost.grad_x(x, z, w), u, h))
        record("phi_xw", cost.hess_xw(x, u, w), fd_jacobian(lambda z: cost.grad_x(x, u, z), w, h))
        record("phi_uu", cost.hess_uu(x, u, w), fd_jacobian(lambda z: cost.grad_u(x, z, w), u, h))
        record("phi_uw", cost.hess_uw(x, u, w), fd_jacobian(lambda z: cost.grad_u(x, u, z), w, h))
        record("phi_ww", cost.hess_ww(x, u, w), fd_jacobian(lambda z: cost.grad_w(x, u, z), w, h))
        record("psi_xx", cost.terminal_hess_xx(x, w), fd_jacobian(lambda z: cost.terminal_grad_x(z, w), x, h))
        record("psi_ww", cost.terminal_hess_ww(x, w), fd_jacobian(lambda z: cost.terminal_grad_w(x, z), w, h))

    report = DerivativeReport(tol=tol)
    for name, err in worst.items():
        report.checks.append(DerivativeCheck(name, err))
    return report
