"""Slack-variable relaxation of coupling inequalities.

Each inequality ``gap >= 0`` is enforced as the equality
``gap - slack**2 = 0`` together with the barrier term
``barrier_weight / slack**2`` in the running cost.  At a stationary
solution the multiplier then satisfies

    multiplier = barrier_weight / slack**4 = barrier_weight / gap**2,

a continuous function of the state, unlike the strict complementarity
switching it replaces.  A constraint whose multiplier would fall below
the activation threshold is dropped from the problem entirely:

    enforced  iff  gap**2 < barrier_weight / activation_threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from collections.abc import Mapping

import numpy as np

from .errors import DecmpcError
from .ocp import Array, CouplingConstraint, OcpDefinition


@dataclass(frozen=True)
class RelaxedConstraint:
    """A coupling constraint bound to its slack/multiplier columns."""

    base: CouplingConstraint
    slack_ref: int
    multiplier_ref: int


def relax_constraints(defn: OcpDefinition) -> tuple[RelaxedConstraint, ...]:
    """Column bindings for the enforced constraints of a problem."""
    return tuple(
        RelaxedConstraint(base=c, slack_ref=j, multiplier_ref=j)
        for j, c in enumerate(defn.constraints)
    )


@dataclass(frozen=True)
class ActivationSet:
    """Per-constraint enforcement flags plus their change history.

    Flags flip only at sample boundaries (the update below is the only
    mutation point and returns a new set).  ``history`` records
    ``(time, constraint_id, flag)`` events, starting with the initial
    flags, so the boolean traces can be reconstructed exactly.
    """

    flags: Mapping[int, bool]
    history: tuple[tuple[float, int, bool], ...] = ()

    @classmethod
    def initial(cls, flags: Mapping[int, bool], t: float = 0.0) -> "ActivationSet":
        events = tuple((t, cid, bool(on)) for cid, on in sorted(flags.items()))
        return cls(flags=dict(flags), history=events)

    @property
    def active_ids(self) -> tuple[int, ...]:
        return tuple(sorted(cid for cid, on in self.flags.items() if on))


def multiplier_from_gap(gap: float, barrier_weight: float) -> float:
    """Stationary multiplier ``barrier_weight / gap**2`` for a positive gap."""
    if not gap > 0.0:
        raise DecmpcError(
            f"multiplier-gap identity undefined for gap {gap!r} <= 0"
        )
    return barrier_weight / gap**2


def activation_threshold_gap(barrier_weight: float, activation_threshold: float) -> float:
    """Gap value at the enforce/drop boundary, ``sqrt(W / H)``."""
    return float(np.sqrt(barrier_weight / activation_threshold))


def activation_update(
    gaps: Mapping[int, float],
    defn: OcpDefinition,
    current: ActivationSet,
    t: float = 0.0,
    hysteresis: float = 1.0,
) -> ActivationSet:
    """Threshold rule applied to the current gaps.

    A constraint is enforced when ``gap**2 < W / H`` and dropped when
    ``gap**2 >= hysteresis * W / H`` (``hysteresis = 1`` is the plain
    single-sided rule).  A nonpositive gap at decision time is an
    emergency: the constraint is enforced unconditionally.  The update is
    a pure function of the gaps, hence idempotent.
    """
    limit = defn.barrier_weight / defn.activation_threshold
    flags = dict(current.flags)
    events = list(current.history)
    for cid, gap in sorted(gaps.items()):
        if not np.isfinite(gap):
            raise DecmpcError(f"non-finite gap for constraint {cid}")
        was_on = flags.get(cid, False)
        if gap <= 0.0:
            now_on = True
        elif was_on:
            now_on = gap * gap < hysteresis * limit
        else:
            now_on = gap * gap < limit
        if now_on != was_on:
            events.append((t, cid, now_on))
        flags[cid] = now_on
    return ActivationSet(flags=flags, history=tuple(events))


def initial_columns_for_activation(
    gap_over_horizon: Array,
    barrier_weight: float,
    slack_floor: float,
) -> tuple[Array, Array, bool]:
    """Consistent slack/multiplier columns for a freshly enforced constraint.

    Per grid step the slack starts at ``sqrt(gap)`` and the multiplier at
    ``barrier_weight / gap**2`` so the new unknowns satisfy their own
    stationarity and equality blocks immediately.  Steps with a
    nonpositive predicted gap fall back to the slack floor (emergency
    activation); the returned flag reports whether that happened.
    """
    gap = np.asarray(gap_over_horizon, dtype=float)
    violated = gap <= slack_floor**2
    safe = np.where(violated, slack_floor**2, gap)
    slacks = np.sqrt(safe)
    mults = barrier_weight / safe**2
    return slacks, mults, bool(violated.any())


def kkt_switching_reference(gap: float, tol: float = 1e-9) -> str:
    """Strict complementarity regime: ``'nonzero'`` iff the gap saturates.

    Diagnostic only.  It exposes the discontinuity the relaxation
    removes: along a gap trajectory crossing ``tol`` this regime jumps
    while ``multiplier_from_gap`` varies continuously.
    """
    return "nonzero" if abs(gap) <= tol else "zero"


def export_activation_history(activation: ActivationSet, path) -> None:
    """Write the flag-change history as CSV ``time,constraint_id,flag``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "constraint_id", "flag"])
        for t, cid, flag in activation.history:
            writer.writerow([repr(float(t)), cid, int(flag)])
