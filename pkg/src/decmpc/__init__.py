"""Decentralized receding-horizon optimal control.

A library for dynamically decoupled agents coupled by feasibility
constraints: a continuation/GMRES tracker of the horizon necessary
conditions, a slack-variable relaxation of the coupling inequalities
with threshold-based activation, a lockstep derivative-broadcast
protocol, and a cooperative-driving benchmark on top of it all.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BarrierDomainError,
    DecmpcError,
    ExogenousCoverageError,
    InitializationError,
    LayoutError,
    NewtonConvergenceError,
    NumericError,
    OracleError,
    ProtocolGapError,
    RolloutDivergenceError,
    ScenarioValidationError,
)
from .ocp import (  # noqa: F401
    CouplingConstraint,
    DynamicsModel,
    HorizonGrid,
    HorizonSolution,
    OcpDefinition,
    RunningCost,
    kkt_residual,
    predict_horizon,
    residual_blocks,
    stack_costs,
    stack_dynamics,
)
from .cgmres import (  # noqa: F401
    GmresResult,
    SolverConfig,
    SolverState,
    continuation_step,
    gmres_solve,
    newton_init,
    solution_derivative,
)
from .relaxation import (  # noqa: F401
    ActivationSet,
    RelaxedConstraint,
    activation_threshold_gap,
    activation_update,
    export_activation_history,
    kkt_switching_reference,
    multiplier_from_gap,
    relax_constraints,
)
from .decentral import (  # noqa: F401
    AgentMessage,
    AgentRuntime,
    LockstepBus,
    ProtocolRound,
    SubproblemSpec,
    build_subproblem,
    initialize_fleet,
    predict_neighbors,
    run_round,
)
from .driving import (  # noqa: F401
    EllipseParams,
    LaneKeepCostParams,
    ScenarioConfig,
    VehicleInput,
    VehicleState,
    build_models,
    ellipse_gap,
    lane_keep_cost,
    load_preset,
    load_scenario,
    make_ellipse_constraint,
    make_fleet_cost,
    make_fleet_dynamics,
    make_lane_keep_cost,
    make_vehicle_dynamics,
    vehicle_dynamics,
)
from .harness import centralized_solve_run, run_centralized, run_decentralized  # noqa: F401
from .logs import TrajectoryLog, scenario_hash  # noqa: F401
from .bench import ComparisonReport, compare, run, timing_profile  # noqa: F401
