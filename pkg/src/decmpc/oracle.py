"""Independent reference solvers used by the test suite.

These deliberately share nothing with the production solver except the
residual definition: dense Newton factorizes a finite-difference Jacobian
with LAPACK, the LQ oracle is a classical finite-horizon Riccati
recursion, and the brute-force search enumerates a control grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OracleError
from .ocp import (
    Array,
    DynamicsModel,
    HorizonSolution,
    OcpDefinition,
    RunningCost,
    StateMap,
    _exogenous_table,
    _residual_flat,
    constraint_gaps_over_horizon,
    fd_jacobian,
    predict_horizon,
)

MAX_DENSE_DIM = 400


@dataclass
class DenseKktSystem:
    """Residual plus dense finite-difference Jacobian of one problem."""

    defn: OcpDefinition
    x0: Array
    exogenous: StateMap | None = None
    t: float = 0.0

    def __post_init__(self):
        self._exo = _exogenous_table(self.defn, self.exogenous)
        self._x0 = np.asarray(self.x0, dtype=float)

    def residual(self, flat: Array) -> Array:
        return _residual_flat(self.defn, self._x0, np.asarray(flat, float), self._exo, self.t)

    def jacobian(self, flat: Array) -> Array:
        return fd_jacobian(self.residual, flat)


def dense_newton_solve(
    defn: OcpDefinition,
    x0: Array,
    guess: HorizonSolution,
    exogenous: StateMap | None = None,
    t: float = 0.0,
    tol: float = 1e-10,
    max_iters: int = 100,
) -> HorizonSolution:
    """Newton with dense factorization down to ``tol``; oracle quality.

    Slack positivity is preserved by halving the step.  Problems beyond
    desk scale (flattened dimension > 400) are refused.
    """
    if defn.unknown_dim > MAX_DENSE_DIM:
        raise OracleError(
            f"dense oracle limited to dimension {MAX_DENSE_DIM}, "
            f"got {defn.unknown_dim}"
        )
    system = DenseKktSystem(defn, x0, exogenous, t)
    nu = defn.dynamics.input_dim
    na = len(defn.constraints)
    m = defn.grid.steps
    flat = guess.flatten()
    f = system.residual(flat)
    norm = np.linalg.norm(f)
    for _ in range(max_iters):
        if norm <= tol:
            break
        jac = system.jacobian(flat)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise OracleError(f"singular Jacobian in dense Newton: {exc}") from exc
        alpha = 1.0
        for _ in range(60):
            trial = flat + alpha * step
            zs = trial.reshape(m, nu + 2 * na)[:, nu:nu + na]
            if not na or (zs > 0.0).all():
                break
            alpha *= 0.5
        else:
            raise OracleError("dense Newton could not keep slacks positive")
        f_trial = system.residual(trial)
        norm_trial = np.linalg.norm(f_trial)
        backtracks = 0
        while norm_trial > norm and backtracks < 30:
            alpha *= 0.5
            trial = flat + alpha * step
            f_trial = system.residual(trial)
            norm_trial = np.linalg.norm(f_trial)
            backtracks += 1
        flat, f, norm = trial, f_trial, norm_trial
    else:
        if norm > tol:
            raise OracleError(f"dense Newton stalled at residual {norm:.3e}")
    return HorizonSolution.from_flat(flat, nu, na)


def riccati_solve(
    A: Array, B: Array, Q: Array, R: Array, steps: int, x0: Array
) -> Array:
    """Finite-horizon discrete LQ oracle with zero terminal weight.

    ``A, B, Q, R`` are the discrete-time matrices of
    ``x+ = A x + B u`` with stage cost ``(x'Qx + u'Ru) / 2``.  Returns the
    optimal controls ``u_0 .. u_{steps-1}`` by backward recursion and a
    forward rollout.
    """
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise OracleError("R must be positive definite") from exc
    n, nu = B.shape
    P = np.zeros((n, n))
    gains = np.empty((steps, nu, n))
    for k in range(steps - 1, -1, -1):
        gains[k] = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A - (A.T @ P @ B) @ gains[k]
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    us = np.empty((steps, nu))
    for k in range(steps):
        us[k] = -gains[k] @ x
        x = A @ x + B @ us[k]
    return us


def euler_lq_matrices(
    A: Array, B: Array, Q: Array, R: Array, dt: float
) -> tuple[Array, Array, Array, Array]:
    """Discretize a continuous LQ problem the way the residual does."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    n = A.shape[0]
    return np.eye(n) + A * dt, B * dt, Q * dt, R * dt


def relaxed_reduced_cost(
    defn: OcpDefinition,
    x0: Array,
    controls: Array,
    exogenous: StateMap | None = None,
) -> float:
    """Relaxed horizon cost with slacks eliminated via ``z**2 = gap``.

    Returns ``+inf`` when any enforced constraint is violated along the
    rollout (the eliminated slack would leave the barrier domain).
    """
    grid = defn.grid
    xs = predict_horizon(x0, controls, defn.dynamics, grid)
    us = np.asarray(controls, dtype=float)
    stage = defn.cost.evaluate(xs[:grid.steps], us)
    total = float(np.sum(stage) * grid.step_size)
    if defn.constraints:
        exo = _exogenous_table(defn, exogenous)
        gaps = constraint_gaps_over_horizon(
            defn.constraints, xs, defn.agent_slices, exo, grid.steps
        )
        if (gaps <= 0.0).any():
            return float("inf")
        total += float(np.sum(defn.barrier_weight / gaps) * grid.step_size)
    return total


def brute_force_tiny(
    defn: OcpDefinition,
    x0: Array,
    grid_resolution: int,
    control_range: tuple[float, float],
    exogenous: StateMap | None = None,
) -> tuple[Array, float]:
    """Exhaustive search over a uniform scalar-control grid.

    Slacks are eliminated through the relaxed equalities, so the search
    runs over controls only.  Sequences are enumerated lexicographically
    with step 0 as the most significant digit and grid points ascending;
    ties break toward the lowest flattened index.  Returns the best
    control sequence and its cost.
    """
    m = defn.grid.steps
    nu = defn.dynamics.input_dim
    if m > 3 or nu != 1:
        raise OracleError("brute force is limited to M <= 3 and scalar input")
    n_points = grid_resolution ** m
    if n_points > 10**7:
        raise OracleError(f"search space {n_points} exceeds 1e7 points")
    levels = np.linspace(control_range[0], control_range[1], grid_resolution)

    exo = _exogenous_table(defn, exogenous)
    dt = defn.grid.step_size
    x0 = np.asarray(x0, dtype=float)
    best_cost = np.inf
    best_idx = -1
    chunk = 100_000
    for start in range(0, n_points, chunk):
        idx = np.arange(start, min(start + chunk, n_points))
        digits = np.empty((idx.size, m), dtype=int)
        rem = idx.copy()
        for k in range(m - 1, -1, -1):
            digits[:, k] = rem % grid_resolution
            rem //= grid_resolution
        us = levels[digits]  # (P, m) scalar controls
        costs = _batched_reduced_cost(defn, x0, us, exo, dt)
        j = int(np.argmin(costs))
        if costs[j] < best_cost:
            best_cost = float(costs[j])
            best_idx = int(idx[j])
    if not np.isfinite(best_cost):
        raise OracleError("relaxed cost infeasible on every grid point")
    digits = np.empty(m, dtype=int)
    rem = best_idx
    for k in range(m - 1, -1, -1):
        digits[k] = rem % grid_resolution
        rem //= grid_resolution
    return levels[digits].reshape(m, 1), best_cost


def _batched_reduced_cost(defn, x0, us, exo, dt) -> Array:
    """Vectorized reduced cost over a batch of scalar control sequences."""
    m = defn.grid.steps
    p = us.shape[0]
    xs = np.empty((m + 1, p, defn.dynamics.state_dim))
    xs[0] = x0
    for k in range(m):
        xs[k + 1] = xs[k] + defn.dynamics.evaluate(xs[k], us[:, k:k + 1]) * dt
    stage = np.zeros(p)
    for k in range(m):
        stage += defn.cost.evaluate(xs[k], us[:, k:k + 1])
    costs = stage * dt
    for con in defn.constraints:
        for k in range(m):
            states = {
                q: xs[k][:, defn.agent_slices[q]] if q in defn.agent_slices
                else np.broadcast_to(exo[q][k], (p, exo[q].shape[1]))
                for q in con.participants
            }
            gap = con.evaluate(states)
            bad = gap <= 0.0
            term = np.where(bad, np.inf, defn.barrier_weight / np.where(bad, 1.0, gap))
            costs = costs + term * dt
    return costs
