"""Per-agent runtime and lockstep broadcast protocol.

One protocol round, executed independently by every agent:

1. predict every neighbor's horizon trajectory from its last broadcast
   solution and solution derivative (first-order extrapolation, then a
   rollout of the extrapolated controls),
2. update the local activation set from the predicted current gaps,
3. run one continuation step on the local subproblem with the neighbor
   predictions as exogenous data,
4. broadcast state, state derivative, solution and solution derivative.

Rounds are separated by a barrier: no message produced in round ``k`` is
consumed in round ``k``.  Agents share no mutable state, so the rounds
may execute agents concurrently or in any order with identical results.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cgmres import (
    SolverConfig,
    SolverState,
    continuation_step,
    kkt_residual_flat,
    newton_init,
    relayout_state,
    solution_derivative,
)
from .driving import ScenarioConfig, ScenarioModels, build_models
from .errors import (
    DecmpcError,
    InitializationError,
    LayoutError,
    ProtocolGapError,
)
from .ocp import (
    Array,
    DynamicsModel,
    HorizonGrid,
    HorizonSolution,
    OcpDefinition,
    constraint_gaps_over_horizon,
    predict_horizon,
)
from .relaxation import (
    ActivationSet,
    activation_update,
    initial_columns_for_activation,
)

_MAGIC = b"DMSG"
_VERSION = 1


@dataclass(frozen=True)
class AgentMessage:
    """Broadcast payload of one agent at one protocol time.

    ``solution`` and ``solution_derivative`` are flattened in the
    canonical step-major layout; ``active_ids`` and ``input_dim`` make
    that layout self-describing for receivers.
    """

    agent_id: int
    timestamp: float
    state: Array
    state_derivative: Array
    solution: Array
    solution_derivative: Array
    active_ids: tuple[int, ...]
    input_dim: int

    def __post_init__(self):
        if self.solution.shape != self.solution_derivative.shape:
            raise LayoutError("solution and derivative dimensions differ")

    def horizon_controls(self, steps: int) -> Array:
        width = self.input_dim + 2 * len(self.active_ids)
        return self.solution.reshape(steps, width)[:, :self.input_dim]

    def encode(self) -> bytes:
        """Length-prefixed little-endian wire form, version 1."""
        out = bytearray()
        out += _MAGIC
        out += struct.pack("<HIdI", _VERSION, self.agent_id, self.timestamp,
                           self.input_dim)
        out += struct.pack("<I", len(self.active_ids))
        out += struct.pack(f"<{len(self.active_ids)}I", *self.active_ids)
        for arr in (self.state, self.state_derivative,
                    self.solution, self.solution_derivative):
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out += struct.pack("<I", arr.size)
            out += arr.tobytes()
        return bytes(out)

    @classmethod
    def decode(cls, blob: bytes) -> "AgentMessage":
        if blob[:4] != _MAGIC:
            raise DecmpcError("not an agent message (bad magic)")
        at = 4
        version, agent_id, timestamp, input_dim = struct.unpack_from("<HIdI", blob, at)
        if version != _VERSION:
            raise DecmpcError(f"unsupported message version {version}")
        at += struct.calcsize("<HIdI")
        (n_ids,) = struct.unpack_from("<I", blob, at)
        at += 4
        ids = struct.unpack_from(f"<{n_ids}I", blob, at)
        at += 4 * n_ids
        arrays = []
        for _ in range(4):
            (length,) = struct.unpack_from("<I", blob, at)
            at += 4
            arrays.append(np.frombuffer(blob, dtype="<f8", count=length, offset=at).copy())
            at += 8 * length
        return cls(
            agent_id=agent_id,
            timestamp=timestamp,
            state=arrays[0],
            state_derivative=arrays[1],
            solution=arrays[2],
            solution_derivative=arrays[3],
            active_ids=tuple(ids),
            input_dim=input_dim,
        )


@dataclass(frozen=True)
class SubproblemSpec:
    """One agent's subproblem for the current round."""

    owner: int
    coupling_set: tuple[int, ...]
    exogenous: dict[int, Array]
    definition: OcpDefinition


@dataclass(frozen=True)
class ProtocolRound:
    """Completed round: its index and every message it produced."""

    round_index: int
    inbox: dict[int, AgentMessage]
    barrier_state: str = "predict"


class LockstepBus:
    """In-process broadcast medium with round bookkeeping.

    ``exchange`` commits a full set of round messages atomically (the
    barrier); when recording is on, every committed message is kept for
    transcript dumps.
    """

    def __init__(self, record: bool = False):
        self.record = record
        self.transcript: list[tuple[int, dict[int, AgentMessage]]] = []
        self.messages_produced = 0
        self.messages_consumed = 0

    def exchange(self, round_index: int, messages: dict[int, AgentMessage]) -> dict[int, AgentMessage]:
        committed = dict(sorted(messages.items()))
        self.messages_produced += len(committed)
        self.messages_consumed += len(committed) * (len(committed) - 1)
        if self.record:
            self.transcript.append((round_index, committed))
        return committed

    def dump_transcript(self, path) -> None:
        with open(path, "wb") as fh:
            for round_index, msgs in self.transcript:
                for agent_id in sorted(msgs):
                    blob = msgs[agent_id].encode()
                    fh.write(struct.pack("<II", round_index, len(blob)))
                    fh.write(blob)


def predict_neighbors(
    messages: dict[int, AgentMessage],
    dt: float,
    grid: HorizonGrid,
    dynamics: dict[int, DynamicsModel],
    plan_dt: float | None = None,
) -> dict[int, Array]:
    """Predicted horizon state trajectories of the message senders.

    Each sender's solution and state are advanced ``dt`` along their
    broadcast derivatives, then the advanced controls are rolled out to
    produce the ``(M+1, n)`` trajectory valid at ``timestamp + dt``.

    ``plan_dt`` advances the control plan by a different amount than the
    state; the continuation right-hand side uses this to capture the
    neighbor's motion between two residual evaluations without
    differentiating its (one round stale) replanning reaction.
    """
    if messages:
        stamps = {m.timestamp for m in messages.values()}
        if len(stamps) > 1:
            raise ProtocolGapError(min(messages), -1)
    if plan_dt is None:
        plan_dt = dt
    out: dict[int, Array] = {}
    for agent_id, msg in messages.items():
        flat = msg.solution + plan_dt * msg.solution_derivative
        width = msg.input_dim + 2 * len(msg.active_ids)
        controls = flat.reshape(grid.steps, width)[:, :msg.input_dim]
        x_hat = msg.state + dt * msg.state_derivative
        out[agent_id] = predict_horizon(x_hat, controls, dynamics[agent_id], grid)
    return out


def build_subproblem(
    agent: int,
    activation: ActivationSet,
    exogenous: dict[int, Array],
    defn: OcpDefinition,
) -> SubproblemSpec:
    """Restrict an agent's full coupling definition to the active set.

    ``defn`` must carry every coupling constraint involving the agent;
    the returned definition keeps only the enforced ones.  Exogenous
    coverage of every non-owner participant is validated eagerly.
    """
    active = set(activation.active_ids)
    cons = tuple(c for c in defn.constraints if c.id in active)
    sub = defn.with_constraints(cons)
    from .ocp import _exogenous_table
    _exogenous_table(sub, exogenous)
    return SubproblemSpec(
        owner=agent,
        coupling_set=tuple(c.id for c in cons),
        exogenous=exogenous,
        definition=sub,
    )


@dataclass
class AgentReport:
    """Snapshot of one agent's round, consumed by the logging harness."""

    time: float
    state: Array
    applied_input: Array
    flags: dict[int, bool]
    residual_norm: float
    gmres_iters: int
    wall_time: float
    degraded: bool = False


class AgentRuntime:
    """Owns one agent's solver, state and activation bookkeeping."""

    def __init__(
        self,
        agent_id: int,
        models: ScenarioModels,
        cfg: SolverConfig,
        x0: Array,
        activation: ActivationSet,
        state: SolverState,
    ):
        self.agent_id = agent_id
        self.models = models
        self.cfg = cfg
        self.x = np.asarray(x0, dtype=float).copy()
        self.activation = activation
        self.couplings = models.constraints_involving(agent_id)
        self.base_defn = models.agent_definition(
            agent_id, tuple(c.id for c in self.couplings)
        )
        self.defn = models.agent_definition(agent_id, activation.active_ids)
        self.state = state
        self.dynamics_map = {
            i: models.vehicle for i in range(models.config.n_agents)
        }
        self.last_report: AgentReport | None = None

    # -- helpers -----------------------------------------------------------

    def _local_gaps(self, neighbor_states: dict[int, Array]) -> dict[int, float]:
        gaps = {}
        for con in self.couplings:
            states = {
                p: self.x if p == self.agent_id else neighbor_states[p]
                for p in con.participants
            }
            gaps[con.id] = float(con.evaluate(states))
        return gaps

    def _apply_activation(self, new_set: ActivationSet, exo: dict[int, Array]) -> None:
        old_ids = self.activation.active_ids
        new_ids = new_set.active_ids
        self.activation = new_set
        if new_ids == old_ids:
            return
        fresh = [cid for cid in new_ids if cid not in old_ids]
        grid = self.models.grid
        new_slacks: dict[int, Array] = {}
        new_mults: dict[int, Array] = {}
        if fresh:
            xs = predict_horizon(
                self.x, self.state.solution.controls, self.models.vehicle, grid
            )
            by_id = {c.id: c for c in self.couplings}
            for cid in fresh:
                gaps = constraint_gaps_over_horizon(
                    [by_id[cid]], xs, self.defn.agent_slices, exo, grid.steps
                )[:, 0]
                z, lam, _ = initial_columns_for_activation(
                    gaps, self.models.config.barrier_weight, self.cfg.slack_floor
                )
                new_slacks[cid], new_mults[cid] = z, lam
        defn_new = self.models.agent_definition(self.agent_id, new_ids)
        self.state = relayout_state(self.state, defn_new, old_ids, new_slacks, new_mults)
        self.defn = defn_new

    # -- one protocol round -------------------------------------------------

    def step(self, neighbor_msgs: dict[int, AgentMessage], t: float) -> AgentMessage:
        grid = self.models.grid
        dt = self.cfg.sample_time
        exo_now = predict_neighbors(neighbor_msgs, dt, grid, self.dynamics_map)
        exo_next = predict_neighbors(
            neighbor_msgs, 2.0 * dt, grid, self.dynamics_map, plan_dt=dt
        )

        neighbor_states = {j: traj[0] for j, traj in exo_now.items()}
        gaps = self._local_gaps(neighbor_states)
        new_set = activation_update(
            gaps, self.base_defn, self.activation, t,
            hysteresis=self.models.config.hysteresis,
        )
        self._apply_activation(new_set, exo_now)

        # feedback phase: absorb the freshly received neighbor data before
        # the first control is applied
        corrected = correct_solution(
            self.defn, self.state, self.x, t, self.cfg, exogenous=exo_now
        )
        corr_wall = corrected.wall_time_last_step
        corr_iters = corrected.last_gmres_iters
        entry_norm = corrected.entry_residual_norm
        self.state = corrected

        flat_now = self.state.solution.flatten()
        u_applied = self.state.solution.controls[0].copy()
        x_dot = self.models.vehicle.evaluate(self.x, u_applied)
        x_now = self.x.copy()

        self.state = continuation_step(
            self.defn, self.state, x_now, x_dot, t, self.cfg,
            exogenous=exo_now, exogenous_next=exo_next,
        )
        msg = AgentMessage(
            agent_id=self.agent_id,
            timestamp=t,
            state=x_now,
            state_derivative=np.asarray(x_dot, float),
            solution=flat_now,
            solution_derivative=self.state.solution.derivative.copy(),
            active_ids=self.defn.active_ids,
            input_dim=self.defn.dynamics.input_dim,
        )
        self.x = x_now + np.asarray(x_dot, float) * dt
        self.last_report = AgentReport(
            time=t,
            state=x_now,
            applied_input=u_applied,
            flags=dict(self.activation.flags),
            residual_norm=entry_norm,
            gmres_iters=corr_iters + self.state.last_gmres_iters,
            wall_time=corr_wall + self.state.wall_time_last_step,
            degraded=self.state.degraded,
        )
        return msg


def run_round(
    agents: list[AgentRuntime],
    bus: LockstepBus,
    rnd: ProtocolRound,
    workers: int = 1,
) -> ProtocolRound:
    """Execute one lockstep round on top of the previous round's messages."""
    expected = {a.agent_id for a in agents}
    missing = expected - set(rnd.inbox)
    if missing:
        raise ProtocolGapError(min(missing), rnd.round_index)
    any_msg = next(iter(rnd.inbox.values()))
    t = any_msg.timestamp + agents[0].cfg.sample_time

    def run_one(agent: AgentRuntime) -> tuple[int, AgentMessage]:
        neighbor_msgs = {
            j: m for j, m in rnd.inbox.items() if j != agent.agent_id
        }
        return agent.agent_id, agent.step(neighbor_msgs, t)

    if workers > 1 and len(agents) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, agents))
    else:
        results = [run_one(a) for a in agents]
    outbox = bus.exchange(rnd.round_index + 1, dict(results))
    return ProtocolRound(rnd.round_index + 1, outbox, "predict")


# ---------------------------------------------------------------------------
# joint <-> per-agent solution plumbing
# ---------------------------------------------------------------------------

def _joint_columns(models: ScenarioModels, active_ids, agent: int):
    """Column indices of one agent's unknowns inside the joint layout."""
    n = models.config.n_agents
    nu_joint = 2 * n
    pos = {cid: k for k, cid in enumerate(active_ids)}
    mine = [cid for cid in active_ids
            if agent in models.constraints[cid].participants]
    cols = [2 * agent, 2 * agent + 1]
    cols += [nu_joint + pos[cid] for cid in mine]
    cols += [nu_joint + len(active_ids) + pos[cid] for cid in mine]
    return np.array(cols, dtype=int), tuple(mine)


def slice_joint_solution(
    models: ScenarioModels,
    active_ids: tuple[int, ...],
    joint_flat: Array,
    joint_derivative: Array | None = None,
) -> dict[int, tuple[Array, Array | None, tuple[int, ...]]]:
    """Split a joint flat solution into per-agent flats.

    Returns ``agent -> (flat, derivative, active_ids_of_agent)``; shared
    slack/multiplier columns are copied into every participant.
    """
    m = models.grid.steps
    n = models.config.n_agents
    width = 2 * n + 2 * len(active_ids)
    w = joint_flat.reshape(m, width)
    dw = None if joint_derivative is None else joint_derivative.reshape(m, width)
    out = {}
    for i in range(n):
        cols, mine = _joint_columns(models, active_ids, i)
        flat_i = w[:, cols].ravel()
        deriv_i = None if dw is None else dw[:, cols].ravel()
        out[i] = (flat_i, deriv_i, mine)
    return out


def reassemble_joint(
    models: ScenarioModels,
    active_ids: tuple[int, ...],
    per_agent: dict[int, Array],
) -> Array:
    """Inverse of :func:`slice_joint_solution`.

    Shared columns are taken from the lowest-indexed participant holding
    them (copies are identical right after slicing).
    """
    m = models.grid.steps
    n = models.config.n_agents
    width = 2 * n + 2 * len(active_ids)
    w = np.zeros((m, width))
    for i in sorted(per_agent, reverse=True):
        cols, mine = _joint_columns(models, active_ids, i)
        wi = per_agent[i].reshape(m, len(cols))
        w[:, cols] = wi
    return w.ravel()


def trim_guess(
    models: ScenarioModels,
    defn: OcpDefinition,
    x0: Array,
) -> HorizonSolution:
    """Trim-control initial guess with barrier-consistent slack columns."""
    m = models.grid.steps
    n_units = defn.dynamics.input_dim // 2
    if defn.dynamics.input_dim == 2 * models.config.n_agents:
        trim = models.trim_controls.reshape(-1)
    else:
        raise LayoutError("trim guess expects the joint problem definition")
    controls = np.tile(trim, (m, 1))
    xs = predict_horizon(x0, controls, defn.dynamics, models.grid)
    na = len(defn.constraints)
    slacks = np.ones((m, na))
    mults = np.zeros((m, na))
    if na:
        gaps = constraint_gaps_over_horizon(
            defn.constraints, xs, defn.agent_slices, {}, m
        )
        if (gaps <= 0.0).any():
            raise InitializationError(
                "initial rollout violates an enforced constraint"
            )
        slacks = np.sqrt(gaps)
        mults = models.config.barrier_weight / gaps**2
    return HorizonSolution(controls=controls, slacks=slacks, multipliers=mults)


def initialize_fleet(
    scenario: "ScenarioConfig",
    cfg: SolverConfig | None = None,
    bus: LockstepBus | None = None,
) -> tuple[list[AgentRuntime], ProtocolRound, LockstepBus]:
    """Centralized initialization of the whole fleet.

    Solves the joint problem once, computes the joint solution derivative,
    slices both into per-agent subproblem solutions and fills every inbox
    with the corresponding round-0 messages.  Each runtime is then
    advanced to the first sample and carries an init report for logging.
    """
    models = build_models(scenario)
    cfg = cfg or models.solver_config()
    bus = bus or LockstepBus()
    n = scenario.n_agents
    x_joint = models.initial_states.reshape(-1)

    gaps0 = {
        c.id: float(c.evaluate({p: models.initial_states[p] for p in c.participants}))
        for c in models.constraints
    }
    base_joint = models.joint_definition(tuple(c.id for c in models.constraints))
    empty = ActivationSet.initial({c.id: False for c in models.constraints})
    act0 = activation_update(gaps0, base_joint, empty, 0.0,
                             hysteresis=scenario.hysteresis)
    active_ids = act0.active_ids

    joint_defn = models.joint_definition(active_ids)
    guess = trim_guess(models, joint_defn, x_joint)
    st = newton_init(joint_defn, x_joint, guess, cfg, 0.0)
    flat = st.solution.flatten()
    u_first = st.solution.controls[0]
    x_dot = models.joint_dynamics.evaluate(x_joint, u_first)
    udot, res, _ = solution_derivative(
        joint_defn, flat, x_joint, x_dot, 0.0, cfg
    )
    init_wall = st.wall_time_last_step

    sliced = slice_joint_solution(models, active_ids, flat, udot)
    agents: list[AgentRuntime] = []
    msgs: dict[int, AgentMessage] = {}
    dt = cfg.sample_time
    for i in range(n):
        flat_i, deriv_i, mine = sliced[i]
        x_i = models.initial_states[i].copy()
        u_i = flat_i.reshape(models.grid.steps, -1)[0, :2]
        xdot_i = models.vehicle.evaluate(x_i, u_i)
        my_ids = {c.id for c in models.constraints_involving(i)}
        act_i = ActivationSet.initial(
            {cid: act0.flags[cid] for cid in sorted(my_ids)}
        )
        sol_i = HorizonSolution.from_flat(flat_i, 2, len(mine), derivative=deriv_i)
        defn_i = models.agent_definition(i, mine)
        exo_i = {
            j: predict_horizon(
                models.initial_states[j],
                sliced[j][0].reshape(models.grid.steps, -1)[:, :2],
                models.vehicle,
                models.grid,
            )
            for j in range(n) if j != i
        }
        res_i = float(np.linalg.norm(
            kkt_residual_flat(defn_i, x_i, flat_i, exo_i, 0.0)
        ))
        state_i = SolverState(
            solution=sol_i,
            residual_norm=res_i,
            last_gmres_iters=res.iterations,
            wall_time_last_step=init_wall,
            entry_residual_norm=res_i,
        )
        runtime = AgentRuntime(i, models, cfg, x_i, act_i, state_i)
        runtime.last_report = AgentReport(
            time=0.0,
            state=x_i.copy(),
            applied_input=u_i.copy(),
            flags=dict(act_i.flags),
            residual_norm=res_i,
            gmres_iters=res.iterations,
            wall_time=init_wall,
        )
        msgs[i] = AgentMessage(
            agent_id=i,
            timestamp=0.0,
            state=x_i.copy(),
            state_derivative=np.asarray(xdot_i, float),
            solution=flat_i.copy(),
            solution_derivative=deriv_i.copy(),
            active_ids=mine,
            input_dim=2,
        )
        # local advance to the first sample using the centrally computed
        # derivative; round 1 then starts from consistent data
        flat_adv = flat_i + deriv_i * dt
        runtime.state = replace(
            state_i,
            solution=HorizonSolution.from_flat(flat_adv, 2, len(mine), derivative=deriv_i),
        )
        runtime.x = x_i + np.asarray(xdot_i, float) * dt
        agents.append(runtime)

    outbox = bus.exchange(0, msgs)
    return agents, ProtocolRound(0, outbox, "predict"), bus
