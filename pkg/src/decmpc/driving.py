"""Cooperative-driving benchmark: vehicle model, costs, constraints, configs.

Vehicles are single point masses in a road-aligned curvilinear frame with
state ``(s, y, theta)`` (arc position, lateral offset, relative heading)
and inputs ``(v, omega)`` (speed, heading rate):

    sdot = v * cos(theta) / (1 - y * kappa)
    ydot = v * sin(theta)
    thetadot = omega

The running cost keeps each vehicle near its target lateral offset and
cruise speed while penalizing lateral velocity and heading rate.  Vehicle
pairs are separated by elliptical feasibility constraints

    gap = (s_i - s_j)**2 / (2*length) + (y_i - y_j)**2 / (2*width) - 1 >= 0.

Scenario files are YAML documents; see ``SCENARIO_SCHEMA`` for the field
list and the bundled presets for examples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import DecmpcError, ScenarioValidationError
from .ocp import (
    Array,
    CouplingConstraint,
    DynamicsModel,
    HorizonGrid,
    OcpDefinition,
    RunningCost,
    agent_state_slices,
)
from .cgmres import SolverConfig

STATE_DIM = 3
INPUT_DIM = 2


@dataclass(frozen=True)
class VehicleState:
    s: float
    y: float
    theta: float

    def as_array(self) -> Array:
        return np.array([self.s, self.y, self.theta], dtype=float)


@dataclass(frozen=True)
class VehicleInput:
    v: float
    omega: float

    def as_array(self) -> Array:
        return np.array([self.v, self.omega], dtype=float)


@dataclass(frozen=True)
class LaneKeepCostParams:
    w1: float
    w2: float
    w3: float
    w4: float
    y_target: float
    v_target: float

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4) < 0.0:
            raise ValueError("cost weights must be nonnegative")


@dataclass(frozen=True)
class EllipseParams:
    length: float = 4.0
    width: float = 2.0

    def __post_init__(self):
        if not (self.length > 0.0 and self.width > 0.0):
            raise ValueError("ellipse axes must be positive")


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def _as_vehicle_batch(x: Array) -> Array:
    """View a stacked fleet state (..., 3n) as (..., n, 3)."""
    return x.reshape(x.shape[:-1] + (-1, STATE_DIM))


def make_fleet_dynamics(n_agents: int, curvature: float = 0.0) -> DynamicsModel:
    """Stacked dynamics of ``n_agents`` identical vehicles.

    Implemented with a batch axis over agents so the joint evaluation
    costs one vectorized pass regardless of fleet size.
    """
    n = STATE_DIM * n_agents
    nu = INPUT_DIM * n_agents
    kappa = float(curvature)

    def _parts(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        lead = x.shape[:-1]
        xv = _as_vehicle_batch(x)
        uv = u.reshape(lead + (-1, INPUT_DIM))
        y, th = xv[..., 1], xv[..., 2]
        v, om = uv[..., 0], uv[..., 1]
        cth, sth = np.cos(th), np.sin(th)
        if kappa == 0.0:
            inv_den = np.ones_like(y)
        else:
            den = 1.0 - y * kappa
            if np.any(np.abs(den) <= 1e-6):
                raise DecmpcError("singular curvature denominator 1 - y*kappa")
            inv_den = 1.0 / den
        return lead, y, th, v, om, cth, sth, inv_den

    def evaluate(x, u):
        lead, y, th, v, om, cth, sth, inv_den = _parts(x, u)
        out = np.empty(y.shape + (STATE_DIM,))
        out[..., 0] = v * cth * inv_den
        out[..., 1] = v * sth
        out[..., 2] = om
        return out.reshape(lead + (n,))

    def jacobian_state(x, u):
        lead, y, th, v, om, cth, sth, inv_den = _parts(x, u)
        blk = np.zeros(y.shape + (STATE_DIM, STATE_DIM))
        blk[..., 0, 1] = v * cth * kappa * inv_den**2
        blk[..., 0, 2] = -v * sth * inv_den
        blk[..., 1, 2] = v * cth
        out = np.zeros(lead + (n, n))
        for i in range(n_agents):
            out[..., 3 * i:3 * i + 3, 3 * i:3 * i + 3] = blk[..., i, :, :]
        return out

    def jacobian_input(x, u):
        lead, y, th, v, om, cth, sth, inv_den = _parts(x, u)
        blk = np.zeros(y.shape + (STATE_DIM, INPUT_DIM))
        blk[..., 0, 0] = cth * inv_den
        blk[..., 1, 0] = sth
        blk[..., 2, 1] = 1.0
        out = np.zeros(lead + (n, nu))
        for i in range(n_agents):
            out[..., 3 * i:3 * i + 3, 2 * i:2 * i + 2] = blk[..., i, :, :]
        return out

    return DynamicsModel(n, nu, evaluate, jacobian_state, jacobian_input)


def make_vehicle_dynamics(curvature: float = 0.0) -> DynamicsModel:
    """Single-vehicle curvilinear point-mass dynamics."""
    return make_fleet_dynamics(1, curvature)


def vehicle_dynamics(x, u, curvature: float = 0.0) -> Array:
    """State derivative ``(sdot, ydot, thetadot)`` at one point."""
    x = x.as_array() if isinstance(x, VehicleState) else np.asarray(x, float)
    u = u.as_array() if isinstance(u, VehicleInput) else np.asarray(u, float)
    return make_vehicle_dynamics(curvature).evaluate(x, u)


# ---------------------------------------------------------------------------
# running cost
# ---------------------------------------------------------------------------

def make_fleet_cost(
    params: "list[LaneKeepCostParams] | tuple[LaneKeepCostParams, ...]",
    curvature: float = 0.0,
) -> RunningCost:
    """Summed lane-keeping cost of a fleet on the stacked state."""
    w = np.array([[p.w1, p.w2, p.w3, p.w4] for p in params])
    y_t = np.array([p.y_target for p in params])
    v_t = np.array([p.v_target for p in params])
    kappa = float(curvature)

    def _parts(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        xv = _as_vehicle_batch(x)
        uv = u.reshape(x.shape[:-1] + (-1, INPUT_DIM))
        y, th = xv[..., 1], xv[..., 2]
        v, om = uv[..., 0], uv[..., 1]
        cth, sth = np.cos(th), np.sin(th)
        if kappa == 0.0:
            inv_den = np.ones_like(y)
        else:
            inv_den = 1.0 / (1.0 - y * kappa)
        sdot = v * cth * inv_den
        ydot = v * sth
        return x.shape, u.shape, y, th, v, om, cth, sth, inv_den, sdot, ydot

    def evaluate(x, u):
        _, _, y, th, v, om, cth, sth, inv_den, sdot, ydot = _parts(x, u)
        terms = (
            w[:, 0] * (y - y_t) ** 2
            + w[:, 1] * ydot**2
            + w[:, 2] * (sdot - v_t) ** 2
            + w[:, 3] * om**2
        )
        return terms.sum(axis=-1)

    def gradient_state(x, u):
        xshape, _, y, th, v, om, cth, sth, inv_den, sdot, ydot = _parts(x, u)
        g = np.zeros(y.shape + (STATE_DIM,))
        ds_dy = sdot * kappa * inv_den  # d(sdot)/dy
        g[..., 1] = 2 * w[:, 0] * (y - y_t) + 2 * w[:, 2] * (sdot - v_t) * ds_dy
        g[..., 2] = (
            2 * w[:, 1] * ydot * v * cth
            + 2 * w[:, 2] * (sdot - v_t) * (-v * sth * inv_den)
        )
        return g.reshape(xshape)

    def gradient_input(x, u):
        _, ushape, y, th, v, om, cth, sth, inv_den, sdot, ydot = _parts(x, u)
        g = np.empty(y.shape + (INPUT_DIM,))
        g[..., 0] = (
            2 * w[:, 1] * ydot * sth + 2 * w[:, 2] * (sdot - v_t) * cth * inv_den
        )
        g[..., 1] = 2 * w[:, 3] * om
        return g.reshape(ushape)

    return RunningCost(evaluate, gradient_state, gradient_input)


def make_lane_keep_cost(params: LaneKeepCostParams, curvature: float = 0.0) -> RunningCost:
    return make_fleet_cost([params], curvature)


def lane_keep_cost(x, u, params: LaneKeepCostParams, curvature: float = 0.0) -> float:
    """Cost rate at one point (convenience wrapper)."""
    x = x.as_array() if isinstance(x, VehicleState) else np.asarray(x, float)
    u = u.as_array() if isinstance(u, VehicleInput) else np.asarray(u, float)
    return float(make_lane_keep_cost(params, curvature).evaluate(x, u))


# ---------------------------------------------------------------------------
# elliptical separation constraints
# ---------------------------------------------------------------------------

def ellipse_gap(xi, xj, ellipse: EllipseParams = EllipseParams()) -> float:
    """Separation margin of two vehicles; negative inside the ellipse."""
    xi = xi.as_array() if isinstance(xi, VehicleState) else np.asarray(xi, float)
    xj = xj.as_array() if isinstance(xj, VehicleState) else np.asarray(xj, float)
    ds = xi[..., 0] - xj[..., 0]
    dy = xi[..., 1] - xj[..., 1]
    return ds**2 / (2.0 * ellipse.length) + dy**2 / (2.0 * ellipse.width) - 1.0


def make_ellipse_constraint(
    cid: int,
    agent_a: int,
    agent_b: int,
    ellipse: EllipseParams = EllipseParams(),
) -> CouplingConstraint:
    inv_l = 1.0 / (2.0 * ellipse.length)
    inv_w = 1.0 / (2.0 * ellipse.width)

    def evaluate(states):
        xa, xb = states[agent_a], states[agent_b]
        ds = xa[..., 0] - xb[..., 0]
        dy = xa[..., 1] - xb[..., 1]
        return ds**2 * inv_l + dy**2 * inv_w - 1.0

    def gradient(states):
        xa, xb = states[agent_a], states[agent_b]
        ds = xa[..., 0] - xb[..., 0]
        dy = xa[..., 1] - xb[..., 1]
        ga = np.zeros(np.shape(ds) + (STATE_DIM,))
        ga[..., 0] = 2.0 * ds * inv_l
        ga[..., 1] = 2.0 * dy * inv_w
        return {agent_a: ga, agent_b: -ga}

    return CouplingConstraint(
        id=cid, participants=(agent_a, agent_b), evaluate=evaluate, gradient=gradient
    )


# ---------------------------------------------------------------------------
# scenario configuration
# ---------------------------------------------------------------------------

SCENARIO_SCHEMA = {
    "version": "int, must be 1",
    "name": "optional str",
    "horizon_T": "horizon length in seconds, > 0",
    "horizon_steps": "grid steps over the horizon, default 20",
    "sample_dt": "control update period in seconds, > 0",
    "duration": "simulated time in seconds, integer multiple of sample_dt",
    "wz": "barrier weight, > 0",
    "hlim": "activation threshold on the multiplier, > 0",
    "vehicle_length": "ellipse length axis parameter, default 4.0",
    "vehicle_width": "ellipse width axis parameter, default 2.0",
    "road_curvature": "1/m, default 0.0",
    "hysteresis": "deactivation threshold factor, default 1.0 (off)",
    "defaults": "optional mapping with w1..w4 applied to all agents",
    "agents": "list of {y_target, v_target, s_start, y_start?, theta_start?, w1..w4?}",
    "solver": "optional solver overrides (gmres_tolerance, gmres_max_iters, "
              "newton_tolerance, newton_max_iters, fd_epsilon, "
              "stabilization_gain, slack_floor)",
}

_TOP_KEYS = set(SCENARIO_SCHEMA)
_AGENT_KEYS = {"y_target", "v_target", "s_start", "y_start", "theta_start",
               "w1", "w2", "w3", "w4"}
_WEIGHT_KEYS = {"w1", "w2", "w3", "w4"}
_SOLVER_KEYS = {"gmres_tolerance", "gmres_max_iters", "newton_tolerance",
                "newton_max_iters", "fd_epsilon", "stabilization_gain",
                "slack_floor"}
_DEFAULT_WEIGHTS = {"w1": 0.55, "w2": 0.05, "w3": 9.0, "w4": 145.0}


@dataclass(frozen=True)
class AgentSetup:
    cost: LaneKeepCostParams
    s_start: float
    y_start: float
    theta_start: float

    def initial_state(self) -> Array:
        return np.array([self.s_start, self.y_start, self.theta_start])


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    horizon_T: float
    horizon_steps: int
    sample_dt: float
    duration: float
    barrier_weight: float
    activation_threshold: float
    ellipse: EllipseParams
    road_curvature: float
    hysteresis: float
    agents: tuple[AgentSetup, ...]
    solver: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def grid(self) -> HorizonGrid:
        return HorizonGrid(self.horizon_T, self.horizon_steps)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.sample_dt))

    def to_dict(self) -> dict:
        """Fully resolved plain-value form (echoed into logs, hashed)."""
        return {
            "version": 1,
            "name": self.name,
            "horizon_T": float(self.horizon_T),
            "horizon_steps": int(self.horizon_steps),
            "sample_dt": float(self.sample_dt),
            "duration": float(self.duration),
            "wz": float(self.barrier_weight),
            "hlim": float(self.activation_threshold),
            "vehicle_length": float(self.ellipse.length),
            "vehicle_width": float(self.ellipse.width),
            "road_curvature": float(self.road_curvature),
            "hysteresis": float(self.hysteresis),
            "agents": [
                {
                    "y_target": float(a.cost.y_target),
                    "v_target": float(a.cost.v_target),
                    "s_start": float(a.s_start),
                    "y_start": float(a.y_start),
                    "theta_start": float(a.theta_start),
                    "w1": float(a.cost.w1),
                    "w2": float(a.cost.w2),
                    "w3": float(a.cost.w3),
                    "w4": float(a.cost.w4),
                }
                for a in self.agents
            ],
            "solver": {k: self.solver[k] for k in sorted(self.solver)},
        }

    def with_duration(self, duration: float) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, duration=float(duration))


def _want_number(doc, key, problems, *, required=False, default=None, positive=False):
    if key not in doc:
        if required:
            problems.append(f"missing required key '{key}'")
        return default
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        problems.append(f"key '{key}' must be a number, got {val!r}")
        return default
    if positive and not val > 0:
        problems.append(f"key '{key}' must be positive, got {val!r}")
        return default
    return float(val)


def load_scenario(source) -> ScenarioConfig:
    """Parse and validate a scenario document.

    ``source`` may be a mapping, a YAML string, or a path to a YAML file.
    All schema violations are collected and reported together; unknown
    keys are rejected.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ScenarioValidationError(["document is not a mapping"])

    problems: list[str] = []
    for key in doc:
        if key not in _TOP_KEYS:
            problems.append(f"unknown key '{key}'")
    if doc.get("version") != 1:
        problems.append(f"version must be 1, got {doc.get('version')!r}")

    horizon_T = _want_number(doc, "horizon_T", problems, required=True, positive=True)
    sample_dt = _want_number(doc, "sample_dt", problems, required=True, positive=True)
    duration = _want_number(doc, "duration", problems, required=True, positive=True)
    wz = _want_number(doc, "wz", problems, required=True, positive=True)
    hlim = _want_number(doc, "hlim", problems, required=True, positive=True)
    steps = doc.get("horizon_steps", 20)
    if not isinstance(steps, int) or steps < 1:
        problems.append(f"horizon_steps must be a positive integer, got {steps!r}")
        steps = 20
    length = _want_number(doc, "vehicle_length", problems, default=4.0, positive=True)
    width = _want_number(doc, "vehicle_width", problems, default=2.0, positive=True)
    curvature = _want_number(doc, "road_curvature", problems, default=0.0)
    hysteresis = _want_number(doc, "hysteresis", problems, default=1.0, positive=True)
    name = doc.get("name", "scenario")
    if not isinstance(name, str):
        problems.append(f"name must be a string, got {name!r}")
        name = "scenario"

    if duration is not None and sample_dt is not None:
        n = round(duration / sample_dt)
        if n < 1 or abs(n * sample_dt - duration) > 1e-9 * max(1.0, duration):
            problems.append("duration must be a positive multiple of sample_dt")

    defaults = dict(_DEFAULT_WEIGHTS)
    user_defaults = doc.get("defaults", {})
    if not isinstance(user_defaults, dict):
        problems.append("defaults must be a mapping")
    else:
        for key in user_defaults:
            if key not in _WEIGHT_KEYS:
                problems.append(f"unknown key 'defaults.{key}'")
        for key in _WEIGHT_KEYS & set(user_defaults):
            val = _want_number(user_defaults, key, problems)
            if val is not None:
                defaults[key] = val

    agents: list[AgentSetup] = []
    raw_agents = doc.get("agents")
    if not isinstance(raw_agents, list) or not raw_agents:
        problems.append("agents must be a non-empty list")
        raw_agents = []
    for i, entry in enumerate(raw_agents):
        if not isinstance(entry, dict):
            problems.append(f"agents[{i}] must be a mapping")
            continue
        for key in entry:
            if key not in _AGENT_KEYS:
                problems.append(f"unknown key 'agents[{i}].{key}'")
        sub: list[str] = []
        y_target = _want_number(entry, "y_target", sub, required=True)
        v_target = _want_number(entry, "v_target", sub, required=True, positive=True)
        s_start = _want_number(entry, "s_start", sub, required=True)
        y_start = _want_number(entry, "y_start", sub, default=y_target)
        theta_start = _want_number(entry, "theta_start", sub, default=0.0)
        weights = {k: _want_number(entry, k, sub, default=defaults[k]) for k in _WEIGHT_KEYS}
        problems.extend(f"agents[{i}]: {p}" for p in sub)
        if sub:
            continue
        agents.append(
            AgentSetup(
                cost=LaneKeepCostParams(
                    w1=weights["w1"], w2=weights["w2"], w3=weights["w3"],
                    w4=weights["w4"], y_target=y_target, v_target=v_target,
                ),
                s_start=s_start,
                y_start=y_start if y_start is not None else y_target,
                theta_start=theta_start,
            )
        )

    solver = doc.get("solver", {})
    if not isinstance(solver, dict):
        problems.append("solver must be a mapping")
        solver = {}
    else:
        for key in solver:
            if key not in _SOLVER_KEYS:
                problems.append(f"unknown key 'solver.{key}'")

    if problems:
        raise ScenarioValidationError(problems)
    return ScenarioConfig(
        name=name,
        horizon_T=horizon_T,
        horizon_steps=steps,
        sample_dt=sample_dt,
        duration=duration,
        barrier_weight=wz,
        activation_threshold=hlim,
        ellipse=EllipseParams(length, width),
        road_curvature=curvature,
        hysteresis=hysteresis,
        agents=tuple(agents),
        solver={k: solver[k] for k in sorted(solver)},
    )


PRESETS = ("two_agent_overtake", "five_agent_convoy", "worst_case_cluster",
           "decoupled_pair")


def load_preset(name: str) -> ScenarioConfig:
    """Load one of the bundled scenario presets by name."""
    if name not in PRESETS:
        raise ScenarioValidationError(
            [f"unknown preset '{name}'; available: {', '.join(PRESETS)}"]
        )
    text = resources.files("decmpc.presets").joinpath(f"{name}.yaml").read_text()
    return load_scenario(yaml.safe_load(text))


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioModels:
    """Everything derived from a scenario config that solvers consume."""

    config: ScenarioConfig
    vehicle: DynamicsModel
    agent_costs: tuple[RunningCost, ...]
    constraints: tuple[CouplingConstraint, ...]
    pairs: tuple[tuple[int, int], ...]
    joint_dynamics: DynamicsModel
    joint_cost: RunningCost
    initial_states: Array  # (N, 3)
    trim_controls: Array   # (N, 2)

    @property
    def grid(self) -> HorizonGrid:
        return self.config.grid

    def constraints_involving(self, agent: int) -> tuple[CouplingConstraint, ...]:
        return tuple(c for c in self.constraints if agent in c.participants)

    def agent_definition(self, agent: int, active_ids) -> OcpDefinition:
        active = set(active_ids)
        cons = tuple(c for c in self.constraints_involving(agent) if c.id in active)
        return OcpDefinition(
            dynamics=self.vehicle,
            cost=self.agent_costs[agent],
            constraints=cons,
            grid=self.grid,
            barrier_weight=self.config.barrier_weight,
            activation_threshold=self.config.activation_threshold,
            agent_slices={agent: slice(0, STATE_DIM)},
        )

    def joint_definition(self, active_ids) -> OcpDefinition:
        active = set(active_ids)
        cons = tuple(c for c in self.constraints if c.id in active)
        return OcpDefinition(
            dynamics=self.joint_dynamics,
            cost=self.joint_cost,
            constraints=cons,
            grid=self.grid,
            barrier_weight=self.config.barrier_weight,
            activation_threshold=self.config.activation_threshold,
            agent_slices=agent_state_slices([STATE_DIM] * self.config.n_agents),
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(sample_time=self.config.sample_dt, **self.config.solver)


def build_models(config: ScenarioConfig) -> ScenarioModels:
    n = config.n_agents
    kappa = config.road_curvature
    vehicle = make_vehicle_dynamics(kappa)
    agent_costs = tuple(make_fleet_cost([a.cost], kappa) for a in config.agents)
    pairs = tuple((i, j) for i in range(n) for j in range(i + 1, n))
    constraints = tuple(
        make_ellipse_constraint(cid, a, b, config.ellipse)
        for cid, (a, b) in enumerate(pairs)
    )
    joint_dynamics = make_fleet_dynamics(n, kappa)
    joint_cost = make_fleet_cost([a.cost for a in config.agents], kappa)
    initial = np.stack([a.initial_state() for a in config.agents])
    trim = np.stack(
        [np.array([a.cost.v_target, 0.0]) for a in config.agents]
    )
    return ScenarioModels(
        config=config,
        vehicle=vehicle,
        agent_costs=agent_costs,
        constraints=constraints,
        pairs=pairs,
        joint_dynamics=joint_dynamics,
        joint_cost=joint_cost,
        initial_states=initial,
        trim_controls=trim,
    )
