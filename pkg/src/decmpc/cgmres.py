"""Continuation/GMRES solver.

The solver traces the zero of the horizon necessary-condition residual
``F(U, x, t) = 0`` through time: each sample it solves

    F_U * Udot = -zeta * F - (F(U, x + xdot*dt, t + dt) - F(U, x, t)) / dt

for the solution derivative with matrix-free GMRES (Jacobian-vector
products by forward differences) and advances ``U <- U + Udot * dt``.
A damped Newton iteration provides the initial zero.

Time dependence of the residual enters only through exogenous neighbor
trajectories, so the advanced evaluation receives the neighbor data
extrapolated to ``t + dt`` by the caller.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, replace
from time import perf_counter

import numpy as np

from .errors import (
    BarrierDomainError,
    InitializationError,
    NewtonConvergenceError,
    NumericError,
)
from .ocp import Array, HorizonSolution, OcpDefinition, StateMap, _exogenous_table, _residual_flat


@dataclass(frozen=True)
class SolverConfig:
    """Numeric knobs shared by initialization and continuation.

    ``gmres_max_iters`` is capped at the unknown dimension of the problem
    actually being solved.  ``stabilization_gain`` of ``None`` resolves to
    ``1 / sample_time``.
    """

    sample_time: float = 0.02
    gmres_max_iters: int = 60
    gmres_tolerance: float = 1e-6
    stabilization_gain: float | None = None
    fd_epsilon: float = 1e-6
    newton_tolerance: float = 1e-8
    newton_max_iters: int = 50
    slack_floor: float = 1e-6
    corrector_rms: float = 5e-3
    corrector_max_steps: int = 2

    def __post_init__(self):
        if not self.sample_time > 0.0:
            raise ValueError("sample_time must be positive")
        if self.gmres_max_iters < 1:
            raise ValueError("gmres_max_iters must be positive")
        if self.stabilization_gain is not None and self.stabilization_gain < 0.0:
            raise ValueError("stabilization_gain must be nonnegative")

    @property
    def zeta(self) -> float:
        if self.stabilization_gain is None:
            return 1.0 / self.sample_time
        return self.stabilization_gain


@dataclass(frozen=True)
class SolverState:
    """Solver bookkeeping carried between samples."""

    solution: HorizonSolution
    residual_norm: float
    last_gmres_iters: int
    wall_time_last_step: float
    entry_residual_norm: float = float("nan")
    degraded: bool = False
    breakdown: bool = False


@dataclass(frozen=True)
class GmresResult:
    x: Array
    relative_residual: float
    iterations: int
    breakdown: bool = False


def gmres_solve(
    apply: Callable[[Array], Array],
    rhs: Array,
    x_init: Array | None = None,
    cfg: SolverConfig | None = None,
    *,
    max_iters: int | None = None,
    tolerance: float | None = None,
) -> GmresResult:
    """Matrix-free GMRES (Arnoldi with Givens rotations, single cycle).

    Stops when the estimated residual satisfies
    ``||apply(x) - rhs|| <= tolerance * ||rhs||`` or after ``max_iters``
    Arnoldi steps, whichever comes first.  A vanishing Arnoldi vector is a
    lucky breakdown: the current subspace already contains the solution,
    which is returned with the breakdown flag set.  Deterministic for
    fixed inputs.
    """
    cfg = cfg or SolverConfig()
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    m_max = min(n, max_iters if max_iters is not None else cfg.gmres_max_iters)
    tol = tolerance if tolerance is not None else cfg.gmres_tolerance

    x0 = np.zeros(n) if x_init is None else np.asarray(x_init, dtype=float).copy()
    b_norm = np.linalg.norm(rhs)
    scale = b_norm if b_norm > 0.0 else 1.0

    r0 = rhs - apply(x0)
    if not np.isfinite(r0).all():
        raise NumericError("non-finite residual in GMRES setup")
    beta = np.linalg.norm(r0)
    if beta <= tol * scale:
        return GmresResult(x0, beta / scale, 0)

    V = np.empty((m_max + 1, n))
    H = np.zeros((m_max + 1, m_max))
    cs = np.empty(m_max)
    sn = np.empty(m_max)
    g = np.zeros(m_max + 1)
    V[0] = r0 / beta
    g[0] = beta

    iters = 0
    broke = False
    for j in range(m_max):
        # copy: the operator may return its argument aliased
        w = np.array(apply(V[j]), dtype=float)
        if not np.isfinite(w).all():
            raise NumericError(f"non-finite operator output at GMRES step {j + 1}")
        # modified Gram-Schmidt
        for i in range(j + 1):
            H[i, j] = V[i] @ w
            w -= H[i, j] * V[i]
        H[j + 1, j] = np.linalg.norm(w)
        iters = j + 1

        happy = H[j + 1, j] <= 1e-14 * max(1.0, abs(H[:j + 2, j]).max())
        if not happy:
            V[j + 1] = w / H[j + 1, j]
        # apply accumulated rotations to the new column
        for i in range(j):
            t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
            H[i, j] = t
        nu = np.hypot(H[j, j], H[j + 1, j])
        if nu == 0.0:
            cs[j], sn[j] = 1.0, 0.0
        else:
            cs[j], sn[j] = H[j, j] / nu, H[j + 1, j] / nu
        H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]

        if happy:
            broke = True
            break
        if abs(g[j + 1]) <= tol * scale:
            break

    k = iters
    y = np.linalg.solve(H[:k, :k], g[:k]) if k else np.zeros(0)
    x = x0 + V[:k].T @ y
    return GmresResult(x, abs(g[k]) / scale, k, broke)


# ---------------------------------------------------------------------------
# residual plumbing
# ---------------------------------------------------------------------------

def _residual_fn(
    defn: OcpDefinition,
    x0: Array,
    exogenous: StateMap | None,
    t: float,
) -> Callable[[Array], Array]:
    exo = _exogenous_table(defn, exogenous)
    x0 = np.asarray(x0, dtype=float)
    return lambda flat: _residual_flat(defn, x0, flat, exo, t)


def _jacobian_action(
    residual: Callable[[Array], Array],
    flat: Array,
    f_now: Array,
    fd_epsilon: float,
) -> Callable[[Array], Array]:
    base = fd_epsilon * max(1.0, float(np.linalg.norm(flat)))

    def apply(v: Array) -> Array:
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return np.zeros_like(f_now)
        eps = base / nv
        return (residual(flat + eps * v) - f_now) / eps

    return apply


def _slack_columns(defn: OcpDefinition, flat: Array) -> Array:
    """Writable view of the slack entries of a flat unknown vector."""
    nu = defn.dynamics.input_dim
    na = len(defn.constraints)
    return flat.reshape(defn.grid.steps, nu + 2 * na)[:, nu:nu + na]


def newton_init(
    defn: OcpDefinition,
    x0: Array,
    guess: HorizonSolution,
    cfg: SolverConfig,
    t0: float = 0.0,
    exogenous: StateMap | None = None,
) -> SolverState:
    """Damped Newton on the residual down to ``newton_tolerance``.

    Jacobian-vector products use forward differences and inner solves use
    :func:`gmres_solve`; steps are halved until every slack stays strictly
    positive and the residual norm does not increase.
    """
    if guess.n_active and not (guess.slacks > 0.0).all():
        raise InitializationError("initial guess has nonpositive slacks")
    started = perf_counter()
    residual = _residual_fn(defn, x0, exogenous, t0)
    flat = guess.flatten()
    f = residual(flat)
    f_norm = float(np.linalg.norm(f))
    iters_used = 0
    for _ in range(cfg.newton_max_iters):
        if f_norm <= cfg.newton_tolerance:
            break
        apply = _jacobian_action(residual, flat, f, cfg.fd_epsilon)
        res = gmres_solve(apply, -f, cfg=cfg, tolerance=min(cfg.gmres_tolerance, 1e-8))
        step = res.x
        alpha = 1.0
        trial = flat + step
        for _ in range(60):
            if not len(defn.constraints) or (_slack_columns(defn, trial) > 0.0).all():
                break
            alpha *= 0.5
            trial = flat + alpha * step
        else:
            raise InitializationError("could not keep slacks positive by damping")
        # backtrack on the residual norm (plain damped Newton)
        f_trial = residual(trial)
        norm_trial = float(np.linalg.norm(f_trial))
        backtracks = 0
        while norm_trial > f_norm and backtracks < 25:
            alpha *= 0.5
            trial = flat + alpha * step
            f_trial = residual(trial)
            norm_trial = float(np.linalg.norm(f_trial))
            backtracks += 1
        flat, f, f_norm = trial, f_trial, norm_trial
        iters_used += 1
    else:
        if f_norm > cfg.newton_tolerance:
            raise NewtonConvergenceError(f_norm, cfg.newton_max_iters)
    sol = HorizonSolution.from_flat(
        flat, defn.dynamics.input_dim, len(defn.constraints)
    )
    return SolverState(
        solution=sol,
        residual_norm=f_norm,
        last_gmres_iters=iters_used,
        wall_time_last_step=perf_counter() - started,
        entry_residual_norm=f_norm,
    )


def solution_derivative(
    defn: OcpDefinition,
    flat: Array,
    x0: Array,
    x0_dot: Array,
    t: float,
    cfg: SolverConfig,
    exogenous: StateMap | None = None,
    exogenous_next: StateMap | None = None,
    warm_start: Array | None = None,
) -> tuple[Array, GmresResult, Array]:
    """Solve the continuation system for ``Udot`` at one time instant.

    Returns ``(Udot, gmres_result, F_now)`` where ``F_now`` is the
    residual at the evaluation point.
    """
    dt = cfg.sample_time
    residual = _residual_fn(defn, x0, exogenous, t)
    f_now = residual(flat)
    x_adv = np.asarray(x0, float) + np.asarray(x0_dot, float) * dt
    residual_adv = _residual_fn(defn, x_adv, exogenous_next if exogenous_next is not None else exogenous, t + dt)
    f_adv = residual_adv(flat)
    rhs = -cfg.zeta * f_now - (f_adv - f_now) / dt
    apply = _jacobian_action(residual, flat, f_now, cfg.fd_epsilon)
    res = gmres_solve(apply, rhs, x_init=warm_start, cfg=cfg)
    return res.x, res, f_now


def continuation_step(
    defn: OcpDefinition,
    state: SolverState,
    x0: Array,
    x0_dot: Array,
    t: float,
    cfg: SolverConfig,
    exogenous: StateMap | None = None,
    exogenous_next: StateMap | None = None,
) -> SolverState:
    """Advance the tracked solution by one sample time.

    The reported ``residual_norm`` is evaluated at the advanced solution,
    the predicted state ``x0 + x0_dot * dt`` and the advanced exogenous
    data, i.e. where the solution will be used next.  Slacks pushed below
    ``slack_floor`` are clamped there and the state flagged as degraded.
    """
    started = perf_counter()
    dt = cfg.sample_time
    flat = state.solution.flatten()
    udot, res, f_now = solution_derivative(
        defn,
        flat,
        x0,
        x0_dot,
        t,
        cfg,
        exogenous=exogenous,
        exogenous_next=exogenous_next,
        warm_start=state.solution.derivative,
    )
    flat_new = flat + udot * dt
    degraded = _clamp_slacks(defn, flat_new, cfg.slack_floor)
    x_next = np.asarray(x0, float) + np.asarray(x0_dot, float) * dt
    exo_next = exogenous_next if exogenous_next is not None else exogenous
    try:
        f_post = kkt_residual_flat(defn, x_next, flat_new, exo_next, t + dt)
        post_norm = float(np.linalg.norm(f_post))
    except BarrierDomainError:
        post_norm = float("inf")
        degraded = True
    wall = perf_counter() - started
    sol = HorizonSolution.from_flat(
        flat_new, defn.dynamics.input_dim, len(defn.constraints), derivative=udot
    )
    return SolverState(
        solution=sol,
        residual_norm=post_norm,
        last_gmres_iters=res.iterations,
        wall_time_last_step=wall,
        entry_residual_norm=float(np.linalg.norm(f_now)),
        degraded=degraded,
        breakdown=res.breakdown,
    )


def correct_solution(
    defn: OcpDefinition,
    state: SolverState,
    x0: Array,
    t: float,
    cfg: SolverConfig,
    exogenous: StateMap | None = None,
) -> SolverState:
    """Pull the tracked solution back onto the manifold for fresh data.

    At each sample the residual of the inherited solution is evaluated
    against the newest state and exogenous data; if its RMS per unknown
    exceeds ``corrector_rms``, up to ``corrector_max_steps`` damped
    Newton corrections absorb the discrepancy before the first control
    is applied.  For smooth tracking this is a single residual
    evaluation and no correction.
    """
    started = perf_counter()
    residual = _residual_fn(defn, x0, exogenous, t)
    flat = state.solution.flatten()
    f = residual(flat)
    norm = float(np.linalg.norm(f))
    rms_scale = np.sqrt(flat.size)
    iters = 0
    corrections = 0
    while corrections < cfg.corrector_max_steps and norm / rms_scale > cfg.corrector_rms:
        apply = _jacobian_action(residual, flat, f, cfg.fd_epsilon)
        res = gmres_solve(apply, -f, cfg=cfg)
        iters += res.iterations
        alpha = 1.0
        trial = flat + res.x
        for _ in range(40):
            if not len(defn.constraints) or (_slack_columns(defn, trial) > 0.0).all():
                break
            alpha *= 0.5
            trial = flat + alpha * res.x
        else:
            break
        f_trial = residual(trial)
        norm_trial = float(np.linalg.norm(f_trial))
        if norm_trial >= norm:
            break
        flat, f, norm = trial, f_trial, norm_trial
        corrections += 1
    if corrections == 0:
        return SolverState(
            solution=state.solution,
            residual_norm=state.residual_norm,
            last_gmres_iters=0,
            wall_time_last_step=perf_counter() - started,
            entry_residual_norm=norm,
            degraded=state.degraded,
            breakdown=state.breakdown,
        )
    sol = HorizonSolution.from_flat(
        flat, defn.dynamics.input_dim, len(defn.constraints),
        derivative=state.solution.derivative,
    )
    return SolverState(
        solution=sol,
        residual_norm=norm,
        last_gmres_iters=iters,
        wall_time_last_step=perf_counter() - started,
        entry_residual_norm=norm,
        degraded=state.degraded,
        breakdown=state.breakdown,
    )


def _clamp_slacks(defn: OcpDefinition, flat: Array, floor: float) -> bool:
    if not len(defn.constraints):
        return False
    zs = _slack_columns(defn, flat)
    low = zs < floor
    if low.any():
        zs[low] = floor
        return True
    return False


def kkt_residual_flat(
    defn: OcpDefinition,
    x0: Array,
    flat: Array,
    exogenous: StateMap | None,
    t: float,
) -> Array:
    """Residual evaluation on an already-flattened unknown vector."""
    return _residual_fn(defn, x0, exogenous, t)(np.asarray(flat, float))


def relayout_state(
    state: SolverState,
    defn_new: OcpDefinition,
    keep_ids: "tuple[int, ...]",
    new_slacks: "dict[int, Array]",
    new_multipliers: "dict[int, Array]",
) -> SolverState:
    """Rebuild a solver state after the enforced constraint set changed.

    Controls carry over; slack/multiplier columns of dropped constraints
    vanish; freshly enforced constraints receive the provided per-step
    initial columns and zero derivative entries.
    """
    old = state.solution
    m = old.steps
    new_ids = defn_new.active_ids
    na = len(new_ids)
    slacks = np.ones((m, na))
    mults = np.zeros((m, na))
    old_pos = {cid: j for j, cid in enumerate(keep_ids)}
    deriv_old = old.derivative
    nu = old.input_dim
    d_old = None if deriv_old is None else deriv_old.reshape(m, nu + 2 * len(keep_ids))
    d_new = np.zeros((m, nu + 2 * na))
    if d_old is not None:
        d_new[:, :nu] = d_old[:, :nu]
    for j, cid in enumerate(new_ids):
        if cid in old_pos:
            k = old_pos[cid]
            slacks[:, j] = old.slacks[:, k]
            mults[:, j] = old.multipliers[:, k]
            if d_old is not None:
                d_new[:, nu + j] = d_old[:, nu + k]
                d_new[:, nu + na + j] = d_old[:, nu + len(keep_ids) + k]
        else:
            slacks[:, j] = new_slacks[cid]
            mults[:, j] = new_multipliers[cid]
    sol = HorizonSolution(
        controls=old.controls.copy(),
        slacks=slacks,
        multipliers=mults,
        derivative=d_new.ravel() if deriv_old is not None else None,
    )
    return replace(state, solution=sol)
