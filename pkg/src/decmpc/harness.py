"""Closed-loop simulation drivers for both solver modes.

Both drivers share the same sample grid and logging semantics so their
logs are directly comparable: sample 0 is the initialization, samples
``1 .. K-1`` come from the per-sample solve rounds (the logged residual
is the one of the solution actually in use at that sample) and sample
``K`` records the terminal state with the last predicted residual.
The plant advances by one Euler step per sample with the first horizon
control held over the interval.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import __version__
from .cgmres import (
    SolverConfig,
    continuation_step,
    newton_init,
    relayout_state,
    solution_derivative,
)
from .decentral import LockstepBus, initialize_fleet, run_round, trim_guess
from .driving import ScenarioConfig, ScenarioModels, build_models
from .errors import DecmpcError
from .logs import LogBuilder, TrajectoryLog
from .ocp import HorizonSolution, constraint_gaps_over_horizon, predict_horizon
from .relaxation import (
    ActivationSet,
    activation_update,
    initial_columns_for_activation,
)


def _joint_gaps(models: ScenarioModels, states: np.ndarray) -> dict[int, float]:
    return {
        c.id: float(c.evaluate({p: states[p] for p in c.participants}))
        for c in models.constraints
    }


def _check_headings(states: np.ndarray, t: float) -> None:
    if np.any(np.abs(states[:, 2]) >= np.pi / 2):
        raise DecmpcError(f"heading left the model validity range at t={t:.3f}")


def run_centralized(
    scenario: ScenarioConfig,
    cfg: SolverConfig | None = None,
    seed: int = 0,
) -> TrajectoryLog:
    """Closed-loop run with one joint continuation solver."""
    models = build_models(scenario)
    cfg = cfg or models.solver_config()
    n = scenario.n_agents
    dt = cfg.sample_time
    k_samples = scenario.n_samples

    builder = LogBuilder(
        mode="centralized",
        seed=seed,
        code_version=__version__,
        config=scenario.to_dict(),
        constraint_pairs=models.pairs,
        n_agents=n,
        n_units=1,
    )

    x = models.initial_states.reshape(-1).copy()
    base = models.joint_definition(tuple(c.id for c in models.constraints))
    act = activation_update(
        _joint_gaps(models, models.initial_states),
        base,
        ActivationSet.initial({c.id: False for c in models.constraints}),
        0.0,
        hysteresis=scenario.hysteresis,
    )
    defn = models.joint_definition(act.active_ids)
    st = newton_init(defn, x, trim_guess(models, defn, x), cfg, 0.0)
    flat = st.solution.flatten()
    u0 = st.solution.controls[0]
    x_dot = models.joint_dynamics.evaluate(x, u0)
    udot, gmres_res, _ = solution_derivative(defn, flat, x, x_dot, 0.0, cfg)
    st = replace(
        st,
        solution=st.solution.with_derivative(udot),
        last_gmres_iters=gmres_res.iterations,
        entry_residual_norm=st.residual_norm,
    )

    def flags_row(a: ActivationSet) -> list[int]:
        return [int(a.flags[c.id]) for c in models.constraints]

    states2d = x.reshape(n, 3)
    gaps_now = _joint_gaps(models, states2d)
    builder.add_sample(
        0.0, states2d, u0.reshape(n, 2),
        [gaps_now[c.id] for c in models.constraints], flags_row(act),
        [st.residual_norm], [st.last_gmres_iters], [st.wall_time_last_step],
    )

    # local advance to sample 1 with the initialization derivative
    flat = flat + udot * dt
    solution = HorizonSolution.from_flat(flat, defn.dynamics.input_dim,
                                         len(defn.constraints), derivative=udot)
    st = replace(st, solution=solution)
    x = x + np.asarray(x_dot, float) * dt

    for k in range(1, k_samples):
        t = k * dt
        states2d = x.reshape(n, 3)
        _check_headings(states2d, t)
        gaps_now = _joint_gaps(models, states2d)
        new_act = activation_update(gaps_now, base, act, t,
                                    hysteresis=scenario.hysteresis)
        if new_act.active_ids != act.active_ids:
            st, defn = _relayout_joint(models, st, defn, new_act, x, cfg)
        act = new_act
        u0 = st.solution.controls[0]
        x_dot = models.joint_dynamics.evaluate(x, u0)
        st = continuation_step(defn, st, x, x_dot, t, cfg)
        builder.add_sample(
            t, states2d, u0.reshape(n, 2),
            [gaps_now[c.id] for c in models.constraints], flags_row(act),
            [st.entry_residual_norm], [st.last_gmres_iters],
            [st.wall_time_last_step],
        )
        x = x + np.asarray(x_dot, float) * dt

    t = k_samples * dt
    states2d = x.reshape(n, 3)
    gaps_now = _joint_gaps(models, states2d)
    act = activation_update(gaps_now, base, act, t, hysteresis=scenario.hysteresis)
    builder.add_sample(
        t, states2d, st.solution.controls[0].reshape(n, 2),
        [gaps_now[c.id] for c in models.constraints], flags_row(act),
        [st.residual_norm], [0], [0.0],
    )
    return builder.build()


def _relayout_joint(models, st, defn, new_act, x, cfg):
    """Column surgery on the joint solution after activation changes."""
    old_ids = defn.active_ids
    new_ids = new_act.active_ids
    fresh = [cid for cid in new_ids if cid not in old_ids]
    new_slacks, new_mults = {}, {}
    if fresh:
        xs = predict_horizon(x, st.solution.controls, defn.dynamics, models.grid)
        by_id = {c.id: c for c in models.constraints}
        for cid in fresh:
            gaps = constraint_gaps_over_horizon(
                [by_id[cid]], xs, defn.agent_slices, {}, models.grid.steps
            )[:, 0]
            z, lam, _ = initial_columns_for_activation(
                gaps, models.config.barrier_weight, cfg.slack_floor
            )
            new_slacks[cid], new_mults[cid] = z, lam
    defn_new = models.joint_definition(new_ids)
    st_new = relayout_state(st, defn_new, old_ids, new_slacks, new_mults)
    return st_new, defn_new


def run_decentralized(
    scenario: ScenarioConfig,
    cfg: SolverConfig | None = None,
    seed: int = 0,
    workers: int = 1,
    record_transcript: bool = False,
) -> tuple[TrajectoryLog, LockstepBus]:
    """Closed-loop run of the lockstep fleet protocol."""
    models = build_models(scenario)
    cfg = cfg or models.solver_config()
    n = scenario.n_agents
    dt = cfg.sample_time
    k_samples = scenario.n_samples
    bus = LockstepBus(record=record_transcript)
    agents, rnd, bus = initialize_fleet(scenario, cfg, bus=bus)

    builder = LogBuilder(
        mode="decentralized",
        seed=seed,
        code_version=__version__,
        config=scenario.to_dict(),
        constraint_pairs=models.pairs,
        n_agents=n,
        n_units=n,
    )

    def merged_flags(reports) -> list[int]:
        row = []
        for c in models.constraints:
            owner = min(c.participants)
            row.append(int(reports[owner].flags[c.id]))
        return row

    def log_from_reports(t):
        reports = {a.agent_id: a.last_report for a in agents}
        states = np.stack([reports[i].state for i in range(n)])
        _check_headings(states, t)
        gaps = _joint_gaps(models, states)
        builder.add_sample(
            t,
            states,
            np.stack([reports[i].applied_input for i in range(n)]),
            [gaps[c.id] for c in models.constraints],
            merged_flags(reports),
            [reports[i].residual_norm for i in range(n)],
            [reports[i].gmres_iters for i in range(n)],
            [reports[i].wall_time for i in range(n)],
        )

    log_from_reports(0.0)
    for k in range(1, k_samples):
        rnd = run_round(agents, bus, rnd, workers=workers)
        log_from_reports(k * dt)

    t = k_samples * dt
    states = np.stack([a.x for a in agents])
    gaps = _joint_gaps(models, states)
    flags_final = []
    for c in models.constraints:
        owner = min(c.participants)
        flags_final.append(int(agents[owner].activation.flags[c.id]))
    builder.add_sample(
        t,
        states,
        np.stack([a.state.solution.controls[0] for a in agents]),
        [gaps[c.id] for c in models.constraints],
        flags_final,
        [a.state.residual_norm for a in agents],
        [0] * n,
        [0.0] * n,
    )
    return builder.build(), bus


def centralized_solve_run(
    scenario: ScenarioConfig,
    cfg: SolverConfig | None = None,
    seed: int = 0,
) -> TrajectoryLog:
    """Alias kept close to the solver module's vocabulary."""
    return run_centralized(scenario, cfg=cfg, seed=seed)
