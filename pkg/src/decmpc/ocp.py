"""Horizon optimal-control problem abstraction.

Defines dynamics, running costs, coupling constraints, the horizon grid,
the flattened unknown layout and the stacked first-order necessary
conditions that every solver in this package consumes.

Conventions
-----------
* States roll out by forward Euler on a uniform horizon grid with ``M``
  steps of size ``dt = T / M``.
* Unknowns are ordered step-major: for each grid step ``k`` the block
  ``[controls_k, slacks_k, multipliers_k]``, with one slack and one
  multiplier per enforced coupling constraint (constraints ordered by id).
* Costates are propagated backward with zero terminal value.
* The relaxed term for an enforced coupling ``j`` at step ``k`` is

      mult * (slack**2 - gap) + barrier_weight / slack**2

  so slack stationarity reads ``2*mult*slack - 2*W/slack**3 = 0`` and the
  multiplier is positive, ``mult = W / slack**4``, at feasible optima.

Model callables are vectorized: they accept arrays whose trailing axis is
the state (or input) dimension and broadcast over any leading axes.
Jacobians and gradients return arrays with the matching trailing axes
``(out_dim, var_dim)`` / ``(var_dim,)``.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BarrierDomainError,
    ExogenousCoverageError,
    LayoutError,
    RolloutDivergenceError,
)

Array = np.ndarray
StateMap = Mapping[int, Array]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DynamicsModel:
    """Continuous-time dynamics ``xdot = f(x, u)`` of one optimized unit.

    The unit may be a single agent or the stacked fleet; the residual
    assembly does not care.
    """

    state_dim: int
    input_dim: int
    evaluate: Callable[[Array, Array], Array]
    jacobian_state: Callable[[Array, Array], Array]
    jacobian_input: Callable[[Array, Array], Array]

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError("state_dim and input_dim must be positive")


@dataclass(frozen=True)
class RunningCost:
    """Scalar cost rate ``h(x, u)`` with analytic gradients."""

    evaluate: Callable[[Array, Array], Array]
    gradient_state: Callable[[Array, Array], Array]
    gradient_input: Callable[[Array, Array], Array]


@dataclass(frozen=True)
class CouplingConstraint:
    """One scalar feasibility constraint ``gap(states) >= 0``.

    ``evaluate`` receives a mapping ``agent_id -> state array`` covering
    exactly ``participants``; ``gradient`` returns the same mapping filled
    with the partial derivative with respect to each participant's state.
    Both are vectorized over leading axes.
    """

    id: int
    participants: tuple[int, ...]
    evaluate: Callable[[StateMap], Array]
    gradient: Callable[[StateMap], dict[int, Array]]

    def __post_init__(self):
        if len(set(self.participants)) != len(self.participants):
            raise ValueError("constraint participants must be distinct")


@dataclass(frozen=True)
class HorizonGrid:
    """Uniform discretization of the moving horizon."""

    horizon_length: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if not self.horizon_length > 0.0:
            raise ValueError("horizon_length must be positive")

    @property
    def step_size(self) -> float:
        return self.horizon_length / self.steps


@dataclass(frozen=True)
class OcpDefinition:
    """Everything a solver needs about one (sub)problem.

    ``constraints`` holds only the couplings currently enforced, ordered
    by ascending id; the activation logic swaps this tuple in and out.
    ``agent_slices`` names which participants are optimized by this
    problem and where their states live inside the stacked state vector;
    participants of a constraint that are not listed here must be covered
    by exogenous trajectories at residual-evaluation time.
    """

    dynamics: DynamicsModel
    cost: RunningCost
    constraints: tuple[CouplingConstraint, ...]
    grid: HorizonGrid
    barrier_weight: float
    activation_threshold: float
    agent_slices: Mapping[int, slice] = field(default_factory=dict)

    def __post_init__(self):
        if not self.barrier_weight > 0.0:
            raise ValueError("barrier_weight must be positive")
        if not self.activation_threshold > 0.0:
            raise ValueError("activation_threshold must be positive")
        ids = [c.id for c in self.constraints]
        if ids != sorted(set(ids)):
            raise ValueError("constraints must be unique and ordered by id")
        if not self.agent_slices:
            object.__setattr__(
                self, "agent_slices", {0: slice(0, self.dynamics.state_dim)}
            )

    @property
    def active_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.constraints)

    @property
    def unknown_dim(self) -> int:
        nu = self.dynamics.input_dim
        return self.grid.steps * (nu + 2 * len(self.constraints))

    def with_constraints(self, constraints: Sequence[CouplingConstraint]) -> "OcpDefinition":
        return replace(self, constraints=tuple(constraints))


@dataclass(frozen=True)
class HorizonSolution:
    """Stacked unknowns over the horizon plus their time derivative.

    ``controls`` is ``(M, nu)``, ``slacks`` and ``multipliers`` are
    ``(M, na)`` with ``na`` the number of enforced constraints.
    ``derivative`` (when present) is the flattened time derivative with
    the same layout as :meth:`flatten`.
    """

    controls: Array
    slacks: Array
    multipliers: Array
    derivative: Array | None = None

    def __post_init__(self):
        m = self.controls.shape[0]
        if self.slacks.shape[0] != m or self.multipliers.shape[0] != m:
            raise LayoutError("controls/slacks/multipliers disagree on step count")
        if self.slacks.shape != self.multipliers.shape:
            raise LayoutError("slacks and multipliers disagree on constraint count")
        if self.slacks.size and not (self.slacks > 0.0).all():
            raise BarrierDomainError("slacks must stay strictly positive")
        if self.derivative is not None and self.derivative.shape != (self.dim,):
            raise LayoutError("derivative layout differs from flattened unknowns")

    @property
    def steps(self) -> int:
        return self.controls.shape[0]

    @property
    def input_dim(self) -> int:
        return self.controls.shape[1]

    @property
    def n_active(self) -> int:
        return self.slacks.shape[1]

    @property
    def dim(self) -> int:
        return self.steps * (self.input_dim + 2 * self.n_active)

    def flatten(self) -> Array:
        """Step-major flattening: ``[u_k, z_k, lam_k]`` per step."""
        return np.concatenate(
            [self.controls, self.slacks, self.multipliers], axis=1
        ).ravel()

    @classmethod
    def from_flat(
        cls,
        flat: Array,
        input_dim: int,
        n_active: int,
        derivative: Array | None = None,
    ) -> "HorizonSolution":
        flat = np.asarray(flat, dtype=float)
        width = input_dim + 2 * n_active
        if width <= 0 or flat.size % width:
            raise LayoutError(
                f"flat vector of size {flat.size} does not fit width {width}"
            )
        w = flat.reshape(-1, width)
        return cls(
            controls=w[:, :input_dim].copy(),
            slacks=w[:, input_dim:input_dim + n_active].copy(),
            multipliers=w[:, input_dim + n_active:].copy(),
            derivative=None if derivative is None else np.asarray(derivative, float),
        )

    @classmethod
    def zeros(cls, steps: int, input_dim: int, n_active: int = 0) -> "HorizonSolution":
        return cls(
            controls=np.zeros((steps, input_dim)),
            slacks=np.ones((steps, n_active)),
            multipliers=np.zeros((steps, n_active)),
        )

    def with_derivative(self, derivative: Array) -> "HorizonSolution":
        return replace(self, derivative=np.asarray(derivative, float))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def predict_horizon(
    x0: Array,
    controls: Array,
    dynamics: DynamicsModel,
    grid: HorizonGrid,
) -> Array:
    """Forward-Euler rollout of ``controls`` from ``x0`` over the grid.

    Returns the ``(M + 1, n)`` array of states ``x_0 .. x_M``.
    """
    x0 = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if controls.shape[0] != grid.steps:
        raise LayoutError(
            f"expected {grid.steps} control rows, got {controls.shape[0]}"
        )
    if not np.isfinite(x0).all():
        raise RolloutDivergenceError(0)
    dt = grid.step_size
    xs = np.empty((grid.steps + 1, dynamics.state_dim))
    xs[0] = x0
    for k in range(grid.steps):
        xs[k + 1] = xs[k] + dynamics.evaluate(xs[k], controls[k]) * dt
    if not np.isfinite(xs).all():
        bad = int(np.argmax(~np.isfinite(xs).all(axis=1)))
        raise RolloutDivergenceError(bad)
    return xs


def _exogenous_table(
    defn: OcpDefinition, exogenous: StateMap | None
) -> dict[int, Array]:
    """Validate and trim exogenous trajectories to ``M`` grid rows."""
    m = defn.grid.steps
    table: dict[int, Array] = {}
    for con in defn.constraints:
        for p in con.participants:
            if p in defn.agent_slices or p in table:
                continue
            if exogenous is None or p not in exogenous:
                raise ExogenousCoverageError(
                    f"no exogenous trajectory for participant {p} "
                    f"of constraint {con.id}"
                )
            traj = np.asarray(exogenous[p], dtype=float)
            if traj.ndim != 2 or traj.shape[0] < m:
                raise ExogenousCoverageError(
                    f"exogenous trajectory for participant {p} must have at "
                    f"least {m} grid rows"
                )
            table[p] = traj[:m]
    return table


def constraint_gaps_over_horizon(
    constraints: Sequence[CouplingConstraint],
    xs: Array,
    agent_slices: Mapping[int, slice],
    exogenous: Mapping[int, Array],
    steps: int,
) -> Array:
    """Gap value of each constraint at grid steps ``0 .. steps-1``.

    ``xs`` is the optimized-state rollout (at least ``steps`` rows);
    exogenous entries must cover the same rows.
    """
    xk = xs[:steps]
    gaps = np.empty((steps, len(constraints)))
    for j, con in enumerate(constraints):
        states = {
            p: xk[:, agent_slices[p]] if p in agent_slices else exogenous[p][:steps]
            for p in con.participants
        }
        gaps[:, j] = con.evaluate(states)
    return gaps


def kkt_residual(
    defn: OcpDefinition,
    x0: Array,
    sol: "HorizonSolution | Array",
    exogenous: StateMap | None = None,
    t: float = 0.0,
) -> Array:
    """Stacked first-order necessary conditions of the discretized problem.

    Per grid step the residual holds, in layout order:

    * control stationarity  ``dh/du + (df/du)^T psi_{k+1}``,
    * slack stationarity    ``2*lam*z - 2*W/z**3``,
    * relaxed equality      ``z**2 - gap``,

    with the costates swept backward from ``psi_M = 0`` via
    ``psi_k = psi_{k+1} + dt * dH/dx``.  The result has exactly the
    dimension of the flattened unknowns.
    """
    flat = sol.flatten() if isinstance(sol, HorizonSolution) else np.asarray(sol, float)
    exo = _exogenous_table(defn, exogenous)
    return _residual_flat(defn, np.asarray(x0, dtype=float), flat, exo, t)


def _residual_flat(
    defn: OcpDefinition,
    x0: Array,
    flat: Array,
    exo: dict[int, Array],
    t: float,
) -> Array:
    grid = defn.grid
    m = grid.steps
    dt = grid.step_size
    nu = defn.dynamics.input_dim
    na = len(defn.constraints)
    width = nu + 2 * na
    if flat.size != m * width:
        raise LayoutError(
            f"flat vector has size {flat.size}, layout expects {m * width}"
        )
    w = flat.reshape(m, width)
    us = w[:, :nu]
    zs = w[:, nu:nu + na]
    lams = w[:, nu + na:]
    if na and not (zs > 0.0).all():
        raise BarrierDomainError("slack at or below zero in residual evaluation")

    xs = predict_horizon(x0, us, defn.dynamics, grid)
    xk = xs[:m]

    dhdx = defn.cost.gradient_state(xk, us)
    dhdu = defn.cost.gradient_input(xk, us)
    dfdx = defn.dynamics.jacobian_state(xk, us)
    dfdu = defn.dynamics.jacobian_input(xk, us)

    n = defn.dynamics.state_dim
    gaps = np.empty((m, na))
    pull = np.zeros((m, n))  # sum_j lam_j * dgap_j/dx over owned slices
    for j, con in enumerate(defn.constraints):
        states = {
            p: xk[:, defn.agent_slices[p]] if p in defn.agent_slices else exo[p]
            for p in con.participants
        }
        gaps[:, j] = con.evaluate(states)
        grads = con.gradient(states)
        for p in con.participants:
            if p in defn.agent_slices:
                pull[:, defn.agent_slices[p]] += lams[:, j:j + 1] * grads[p]

    # backward costate sweep; psis[k] stores psi_{k+1}
    psis = np.empty((m, n))
    psi = np.zeros(n)
    for k in range(m - 1, -1, -1):
        psis[k] = psi
        psi = psi + dt * (dhdx[k] + dfdx[k].T @ psi - pull[k])

    out = np.empty((m, width))
    out[:, :nu] = dhdu + np.einsum("kni,kn->ki", dfdu, psis)
    if na:
        out[:, nu:nu + na] = 2.0 * lams * zs - 2.0 * defn.barrier_weight / zs**3
        # written as z^2 - gap so the (slack, multiplier) Jacobian block is
        # symmetric; the zero set is the relaxed equality either way
        out[:, nu + na:] = zs * zs - gaps
    return out.ravel()


def residual_blocks(defn: OcpDefinition, residual: Array) -> dict[str, Array]:
    """Split a flat residual into its control/slack/equality blocks."""
    m = defn.grid.steps
    nu = defn.dynamics.input_dim
    na = len(defn.constraints)
    w = residual.reshape(m, nu + 2 * na)
    return {
        "control": w[:, :nu],
        "slack": w[:, nu:nu + na],
        "equality": w[:, nu + na:],
    }


# ---------------------------------------------------------------------------
# stacking of per-agent models into one joint problem
# ---------------------------------------------------------------------------

def _offsets(dims: Sequence[int]) -> list[slice]:
    out, at = [], 0
    for d in dims:
        out.append(slice(at, at + d))
        at += d
    return out


def stack_dynamics(models: Sequence[DynamicsModel]) -> DynamicsModel:
    """Block-diagonal stacking of independent per-agent dynamics."""
    xs_sl = _offsets([m.state_dim for m in models])
    us_sl = _offsets([m.input_dim for m in models])
    n = xs_sl[-1].stop
    nu = us_sl[-1].stop

    def evaluate(x, u):
        return np.concatenate(
            [m.evaluate(x[..., sx], u[..., su]) for m, sx, su in zip(models, xs_sl, us_sl)],
            axis=-1,
        )

    def jacobian_state(x, u):
        out = np.zeros(x.shape[:-1] + (n, n))
        for m, sx, su in zip(models, xs_sl, us_sl):
            out[..., sx, sx] = m.jacobian_state(x[..., sx], u[..., su])
        return out

    def jacobian_input(x, u):
        out = np.zeros(x.shape[:-1] + (n, nu))
        for m, sx, su in zip(models, xs_sl, us_sl):
            out[..., sx, su] = m.jacobian_input(x[..., sx], u[..., su])
        return out

    return DynamicsModel(n, nu, evaluate, jacobian_state, jacobian_input)


def stack_costs(
    costs: Sequence[RunningCost],
    state_dims: Sequence[int],
    input_dims: Sequence[int],
) -> RunningCost:
    """Sum of per-agent running costs on the stacked state/input."""
    xs_sl = _offsets(state_dims)
    us_sl = _offsets(input_dims)

    def evaluate(x, u):
        total = 0.0
        for c, sx, su in zip(costs, xs_sl, us_sl):
            total = total + c.evaluate(x[..., sx], u[..., su])
        return total

    def gradient_state(x, u):
        return np.concatenate(
            [c.gradient_state(x[..., sx], u[..., su]) for c, sx, su in zip(costs, xs_sl, us_sl)],
            axis=-1,
        )

    def gradient_input(x, u):
        return np.concatenate(
            [c.gradient_input(x[..., sx], u[..., su]) for c, sx, su in zip(costs, xs_sl, us_sl)],
            axis=-1,
        )

    return RunningCost(evaluate, gradient_state, gradient_input)


def agent_state_slices(state_dims: Sequence[int]) -> dict[int, slice]:
    return dict(enumerate(_offsets(state_dims)))


# ---------------------------------------------------------------------------
# finite-difference helpers (shared by tests and oracles)
# ---------------------------------------------------------------------------

def fd_jacobian(fn: Callable[[Array], Array], x: Array, eps: float = 1e-7) -> Array:
    """Dense forward-difference Jacobian of ``fn`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        step = eps * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += step
        jac[:, i] = (np.asarray(fn(xp), float) - f0) / step
    return jac


def fd_gradient_check(
    fn: Callable[[Array], Array],
    grad: Array,
    x: Array,
    eps: float = 1e-6,
) -> float:
    """Relative error between ``grad`` and a central-difference gradient."""
    x = np.asarray(x, dtype=float)
    num = np.empty_like(x)
    for i in range(x.size):
        step = eps * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        num[i] = (fn(xp) - fn(xm)) / (2 * step)
    scale = max(np.linalg.norm(num), np.linalg.norm(grad), 1e-12)
    return float(np.linalg.norm(num - np.asarray(grad, float)) / scale)
