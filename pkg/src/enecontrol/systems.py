"""Concrete plant instances: the cart-inverted-pendulum benchmark and small
synthetic linear-quadratic systems used by oracles and property tests.

The pendulum's continuous dynamics are

    zdd = (F - Kd zd - mp (L thd^2 sin th - g sin th cos th) - 2 w_z)
          / (Mc + mp sin^2 th)
    thd' = (zdd cos th + g sin th) / L - w_th / (mp L^2)

with cart position z, pendulum angle th, drive force F, friction force w_z,
and friction torque w_th.  Discretization is forward Euler at the sample time
(an RK4 variant is available behind a scenario flag for sensitivity studies).
First derivatives of the discrete map are finite differences; the preview
model and the force-box constraints are affine and supplied analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ConstraintSet, CostSpec, PlantModel, PreviewSignal
from .ocp import OcpProblem, Trajectory, rollout

Array = np.ndarray


@dataclass(frozen=True)
class PendulumParams:
    """Physical constants of the cart-inverted-pendulum benchmark."""

    pendulum_mass: float = 1.0  # kg
    cart_mass: float = 5.0  # kg
    length: float = 2.0  # m
    gravity: float = 9.81  # m/s^2
    damping: float = 10.0  # N s/m
    dt: float = 0.1  # s
    force_bound: float = 300.0  # N

    def __post_init__(self):
        for name in ("pendulum_mass", "cart_mass", "length", "gravity", "damping", "dt", "force_bound"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def pendulum_continuous(x: Array, force, w_z, w_theta, params: PendulumParams = PendulumParams()) -> Array:
    """Continuous state derivative [zd, zdd, thd, thdd]; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    zd = x[..., 1]
    th = x[..., 2]
    thd = x[..., 3]
    mp, mc, length, grav = params.pendulum_mass, params.cart_mass, params.length, params.gravity
    sin, cos = np.sin(th), np.cos(th)
    denom = mc + mp * sin**2
    zdd = (force - params.damping * zd - mp * (length * thd**2 * sin - grav * sin * cos) - 2.0 * w_z) / denom
    thdd = (zdd * cos + grav * sin) / length - w_theta / (mp * length**2)
    return np.stack([zd, zdd, thd, thdd], axis=-1)


def _pendulum_step(x, u, w, params: PendulumParams, integrator: str):
    force = np.asarray(u, dtype=float)[..., 0]
    w = np.asarray(w, dtype=float)
    w_z = w[..., 1]
    w_th = w[..., 3]
    if integrator == "euler":
        return x + params.dt * pendulum_continuous(x, force, w_z, w_th, params)
    if integrator == "rk4":
        h = params.dt
        k1 = pendulum_continuous(x, force, w_z, w_th, params)
        k2 = pendulum_continuous(x + 0.5 * h * k1, force, w_z, w_th, params)
        k3 = pendulum_continuous(x + 0.5 * h * k2, force, w_z, w_th, params)
        k4 = pendulum_continuous(x + h * k3, force, w_z, w_th, params)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    raise ValueError(f"unknown integrator {integrator!r}")


def pendulum_preview_model(kind: str, state_coeff: float = -0.008, preview_coeff: float = -0.1):
    """Nominal preview recursions: 'hold' keeps w constant, 'recursion' applies
    w' = state_coeff * x + preview_coeff * w componentwise."""
    if kind == "hold":
        return (
            lambda x, w: np.asarray(w, dtype=float).copy(),
            lambda x, w: np.zeros((4, 4)),
            lambda x, w: np.eye(4),
        )
    if kind == "recursion":
        return (
            lambda x, w: state_coeff * np.asarray(x, dtype=float) + preview_coeff * np.asarray(w, dtype=float),
            lambda x, w: state_coeff * np.eye(4),
            lambda x, w: preview_coeff * np.eye(4),
        )
    raise ValueError(f"unknown preview model {kind!r}")


def pendulum_discrete(
    params: PendulumParams = PendulumParams(),
    preview_model: str = "recursion",
    state_coeff: float = -0.008,
    preview_coeff: float = -0.1,
    integrator: str = "euler",
) -> PlantModel:
    """Euler-discretized pendulum with preview slots w = [0, w_z, 0, w_theta]."""
    g_fun, g_x, g_w = pendulum_preview_model(preview_model, state_coeff, preview_coeff)
    return PlantModel(
        n=4,
        m=1,
        n_w=4,
        f=lambda x, u, w: _pendulum_step(np.asarray(x, dtype=float), u, w, params, integrator),
        g=g_fun,
        g_x=g_x,
        g_w=g_w,
        g_affine=True,
        batched=True,
    )


def pendulum_constraints(params: PendulumParams = PendulumParams()) -> ConstraintSet:
    return ConstraintSet.box_on_controls([-params.force_bound], [params.force_bound])


def pendulum_cost(
    output_weights=(10.0, 50.0),
    control_weight: float = 0.001,
    terminal_scale: float = 10.0,
    reference=(0.0, 0.0),
    output_indices=(0, 2),
) -> CostSpec:
    """Output-tracking quadratic: phi = sum_i ow_i (y_i - r_i)^2 + cw * |u|^2,
    psi the same output weights scaled by ``terminal_scale``."""
    ow = np.asarray(output_weights, dtype=float)
    ref = np.asarray(reference, dtype=float)
    oi = list(output_indices)
    cw = float(control_weight)
    n = 4

    def out_quad(x, scale):
        dy = x[oi] - ref
        return scale * float(dy @ (ow * dy))

    def out_grad(x, scale):
        grad = np.zeros(n)
        grad[oi] = 2.0 * scale * ow * (x[oi] - ref)
        return grad

    def out_hess(scale):
        hess = np.zeros((n, n))
        for i, o in enumerate(oi):
            hess[o, o] = 2.0 * scale * ow[i]
        return hess

    return CostSpec(
        phi=lambda x, u, w: out_quad(x, 1.0) + cw * float(u @ u),
        psi=lambda x, w: out_quad(x, terminal_scale),
        phi_x=lambda x, u, w: out_grad(x, 1.0),
        phi_u=lambda x, u, w: 2.0 * cw * u,
        phi_w=lambda x, u, w: np.zeros(w.size),
        phi_xx=lambda x, u, w: out_hess(1.0),
        phi_xu=lambda x, u, w: np.zeros((n, u.size)),
        phi_xw=lambda x, u, w: np.zeros((n, w.size)),
        phi_uu=lambda x, u, w: 2.0 * cw * np.eye(u.size),
        phi_uw=lambda x, u, w: np.zeros((u.size, w.size)),
        phi_ww=lambda x, u, w: np.zeros((w.size, w.size)),
        psi_x=lambda x, w: out_grad(x, terminal_scale),
        psi_w=lambda x, w: np.zeros(w.size),
        psi_xx=lambda x, w: out_hess(terminal_scale),
        psi_ww=lambda x, w: np.zeros((w.size, w.size)),
    )


@dataclass(frozen=True)
class ScenarioSpec:
    """A complete pendulum experiment: horizon, nominal initial conditions,
    nominal preview model, initial state perturbation, actual preview
    generator, and cost weights."""

    name: str = "custom"
    horizon: int = 35
    x0: tuple[float, ...] = (0.0, 0.0, -np.pi, 0.0)
    w0: tuple[float, ...] = (0.0, 0.1, 0.0, 0.1)
    delta_x0: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    generator_a: float = 0.0
    generator_b: float = 0.0
    generator_c: float = 0.0
    generator_seed: int = 12345
    preview_model: str = "recursion"
    preview_state_coeff: float = -0.008
    preview_coeff: float = -0.1
    output_weights: tuple[float, float] = (10.0, 50.0)
    control_weight: float = 0.001
    terminal_scale: float = 10.0
    reference: tuple[float, float] = (0.0, 0.0)
    output_indices: tuple[int, int] = (0, 2)
    preview_pattern: tuple[float, ...] = (0.0, 1.0, 0.0, 1.0)
    integrator: str = "euler"
    params: PendulumParams = field(default_factory=PendulumParams)

    @staticmethod
    def small(seed: int = 12345) -> "ScenarioSpec":
        return ScenarioSpec(
            name="small",
            delta_x0=(0.01, 0.01, 0.01, 0.01),
            generator_a=0.004,
            generator_b=0.004,
            generator_c=0.002,
            generator_seed=seed,
        )

    @staticmethod
    def large(seed: int = 12345) -> "ScenarioSpec":
        return ScenarioSpec(
            name="large",
            delta_x0=(0.2, 0.2, 0.2, 0.2),
            generator_a=0.015,
            generator_b=0.015,
            generator_c=0.01,
            generator_seed=seed,
        )

    @staticmethod
    def preview_sweep(seed: int = 12345, preview_model: str = "recursion") -> "ScenarioSpec":
        return ScenarioSpec(
            name=f"sweep-{preview_model}",
            delta_x0=(0.2, 0.2, 0.2, 0.2),
            generator_a=0.008,
            generator_b=0.008,
            generator_c=0.004,
            generator_seed=seed,
            preview_model=preview_model,
        )

    def plant(self) -> PlantModel:
        return pendulum_discrete(
            self.params, self.preview_model, self.preview_state_coeff, self.preview_coeff, self.integrator
        )

    def constraints(self) -> ConstraintSet:
        return pendulum_constraints(self.params)

    def cost(self) -> CostSpec:
        return pendulum_cost(
            self.output_weights, self.control_weight, self.terminal_scale, self.reference, self.output_indices
        )

    def problem(self) -> OcpProblem:
        return OcpProblem(
            horizon=self.horizon,
            model=self.plant(),
            constraints=self.constraints(),
            cost=self.cost(),
            x0=np.asarray(self.x0, dtype=float),
            w0=np.asarray(self.w0, dtype=float),
        )

    def actual_preview(self) -> PreviewSignal:
        return PreviewSignal(
            source="generator",
            a=self.generator_a,
            b=self.generator_b,
            c=self.generator_c,
            seed=self.generator_seed,
            pattern=self.preview_pattern,
        )

    def outputs(self, xs: Array) -> Array:
        return xs[:, list(self.output_indices)]


# -- synthetic linear-quadratic fixtures --------------------------------------


@dataclass
class LqrMatrices:
    """Raw matrices of a random preview-coupled linear-quadratic system."""

    a: Array
    b: Array
    e: Array
    g: Array
    h: Array
    q: Array
    r: Array
    qf: Array
    q_w: Array
    qf_w: Array


def _spectral_scale(mat: Array, target: float, rng) -> Array:
    radius = float(np.max(np.abs(np.linalg.eigvals(mat)))) if mat.size else 0.0
    if radius < 1e-9:
        return mat
    return mat * (target * rng.uniform(0.5, 1.0) / radius)


def random_lqr_matrices(n: int, m: int, seed: int, decoupled: bool = False) -> LqrMatrices:
    rng = np.random.default_rng(seed)
    a = _spectral_scale(rng.normal(size=(n, n)), 0.9, rng)
    b = rng.normal(size=(n, m))
    h = _spectral_scale(rng.normal(size=(n, n)), 0.8, rng)
    e = 0.3 * rng.normal(size=(n, n))
    g = 0.1 * rng.normal(size=(n, n))
    if decoupled:
        e = np.zeros((n, n))
        g = np.zeros((n, n))
        h = np.zeros((n, n))
    mq = rng.normal(size=(n, n))
    q = mq.T @ mq / n
    r = np.eye(m) * (1.0 + rng.uniform(0.2, 1.0)) + np.diag(rng.uniform(0.0, 0.3, size=m))
    mf = rng.normal(size=(n, n))
    qf = mf.T @ mf / n
    mw = rng.normal(size=(n, n))
    q_w = 0.2 * mw.T @ mw / n
    qf_w = np.zeros((n, n))
    return LqrMatrices(a, b, e, g, h, q, r, qf, q_w, qf_w)


def lqr_preview_system(n: int, m: int, seed: int, decoupled: bool = False) -> tuple[PlantModel, CostSpec]:
    """Random stable linear plant with linear preview model and quadratic cost.

    Dynamics x' = A x + B u + E w, preview w' = G x + H w, spectral radii
    below 0.95; costs (x'Qx + u'Ru + w'Q_w w)/2 with R positive definite.
    ``decoupled`` zeroes E, G, H so the preview has no effect.
    """
    mats = random_lqr_matrices(n, m, seed, decoupled)
    model = linear_preview_model(mats)
    cost = CostSpec.quadratic(mats.q, mats.r, mats.qf, q_w=mats.q_w, qf_w=mats.qf_w)
    return model, cost


def linear_preview_model(mats: LqrMatrices) -> PlantModel:
    n, m = mats.b.shape
    return PlantModel(
        n=n,
        m=m,
        n_w=mats.h.shape[0],
        f=lambda x, u, w: mats.a @ x + mats.b @ u + mats.e @ w,
        g=lambda x, w: mats.g @ x + mats.h @ w,
        f_x=lambda x, u, w: mats.a.copy(),
        f_u=lambda x, u, w: mats.b.copy(),
        f_w=lambda x, u, w: mats.e.copy(),
        g_x=lambda x, w: mats.g.copy(),
        g_w=lambda x, w: mats.h.copy(),
        f_affine=True,
        g_affine=True,
        origin_fixed=True,
    )


def equivalence_fixture(seed: int) -> tuple[OcpProblem, Trajectory]:
    """Seeded small fixture with an imposed mixed active set, for oracle checks.

    A random nominal rollout of a preview-coupled linear-quadratic problem
    under box control constraints; per-step activity is imposed directly (one
    box row per randomly chosen control, never both rows of one control, at
    most m rows per step).
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    m = int(rng.integers(1, 3))
    horizon = int(rng.integers(3, 7))
    mats = random_lqr_matrices(n, m, int(rng.integers(0, 2**31)))
    model = linear_preview_model(mats)
    cost = CostSpec.quadratic(mats.q, mats.r, mats.qf, q_w=mats.q_w, qf_w=mats.qf_w)
    bound = rng.uniform(2.0, 4.0, size=m)
    constraints = ConstraintSet.box_on_controls(-bound, bound)
    problem = OcpProblem(
        horizon=horizon,
        model=model,
        constraints=constraints,
        cost=cost,
        x0=rng.normal(scale=0.5, size=n),
        w0=rng.normal(scale=0.5, size=n),
    )
    us = rng.normal(scale=0.3, size=(horizon, m))
    traj = rollout(problem, us)
    active: list[tuple[int, ...]] = []
    for _ in range(horizon):
        chosen: list[int] = []
        controls = [j for j in range(m) if rng.uniform() < 0.4]
        for j in controls:
            chosen.append(j if rng.uniform() < 0.5 else m + j)  # upper row j or lower row m+j
        active.append(tuple(sorted(chosen)))
    traj.active = active
    return problem, traj
