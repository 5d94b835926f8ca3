"""Exception types shared across the package."""


class DecmpcError(Exception):
    """Base class for all library errors."""


class RolloutDivergenceError(DecmpcError):
    """State rollout produced a non-finite value.

    Carries the first grid step at which the divergence was detected.
    """

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"state rollout diverged at grid step {step}")


class BarrierDomainError(DecmpcError):
    """A slack variable left the strictly positive barrier domain."""


class LayoutError(DecmpcError):
    """Flattened unknown vector does not match the problem layout."""


class NumericError(DecmpcError):
    """Non-finite arithmetic inside an iterative solver."""


class NewtonConvergenceError(DecmpcError):
    """Newton initialization exhausted its iteration budget."""

    def __init__(self, best_residual_norm: float, iterations: int):
        self.best_residual_norm = best_residual_norm
        self.iterations = iterations
        super().__init__(
            f"Newton did not converge in {iterations} iterations "
            f"(best residual norm {best_residual_norm:.3e})"
        )


class InitializationError(DecmpcError):
    """Solver initialization failed (e.g. slack positivity unfixable)."""


class ProtocolGapError(DecmpcError):
    """A lockstep round is missing a message it depends on."""

    def __init__(self, agent_id: int, round_index: int):
        self.agent_id = agent_id
        self.round_index = round_index
        super().__init__(
            f"missing message from agent {agent_id} for round {round_index}"
        )


class ExogenousCoverageError(DecmpcError):
    """Exogenous trajectories do not cover a constraint participant."""


class OracleError(DecmpcError):
    """A reference oracle could not produce a trustworthy answer."""


class ScenarioValidationError(DecmpcError):
    """Scenario document violates the published schema."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  - " + "\n  - ".join(self.problems))
