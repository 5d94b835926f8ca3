"""Benchmark front end: run scenarios, compare logs, profile timings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .driving import ScenarioConfig, load_scenario
from .errors import DecmpcError
from .harness import run_centralized, run_decentralized
from .logs import TrajectoryLog

MODES = ("centralized", "decentralized")


def run(
    scenario,
    mode: str,
    out: "str | Path | None" = None,
    duration: float | None = None,
    workers: int = 1,
    seed: int = 0,
    emit_plots: "str | Path | None" = None,
    transcript: "str | Path | None" = None,
) -> TrajectoryLog:
    """Run a scenario in the requested mode and optionally write artifacts.

    ``scenario`` may be a path, a YAML string, a mapping or an already
    parsed :class:`ScenarioConfig`.  ``duration`` overrides the scenario
    duration.  ``emit_plots`` writes plot-ready CSV series into the given
    directory; ``transcript`` (decentralized only) dumps the binary
    message transcript.
    """
    if mode not in MODES:
        raise DecmpcError(f"mode must be one of {MODES}, got {mode!r}")
    config = scenario if isinstance(scenario, ScenarioConfig) else load_scenario(scenario)
    if duration is not None:
        config = config.with_duration(duration)
    if mode == "centralized":
        log = run_centralized(config, seed=seed)
        bus = None
    else:
        log, bus = run_decentralized(
            config, seed=seed, workers=workers,
            record_transcript=transcript is not None,
        )
    if out is not None:
        log.write_csv(out)
    if transcript is not None and bus is not None:
        bus.dump_transcript(transcript)
    if emit_plots is not None:
        emit_plot_data(log, emit_plots)
    return log


@dataclass
class ComparisonReport:
    """Trajectory and timing comparison of two runs of one scenario."""

    scenario_hash: str
    mode_a: str
    mode_b: str
    max_lateral_difference: float
    max_lateral_difference_percent: float
    mean_wall_a: float
    max_wall_a: float
    mean_wall_b: float
    max_wall_b: float
    wall_by_active_count_a: dict[int, float]
    wall_by_active_count_b: dict[int, float]

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["wall_by_active_count_a"] = {
            str(k): v for k, v in self.wall_by_active_count_a.items()
        }
        doc["wall_by_active_count_b"] = {
            str(k): v for k, v in self.wall_by_active_count_b.items()
        }
        return doc

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def lateral_difference_series(log_a: TrajectoryLog, log_b: TrajectoryLog) -> np.ndarray:
    """Per-sample max over agents of the |y| trajectory difference."""
    return np.abs(log_a.states[:, :, 1] - log_b.states[:, :, 1]).max(axis=1)


def _wall_buckets(log: TrajectoryLog) -> dict[int, float]:
    """Mean wall time (all solver units) grouped by active-flag count.

    Sample 0 is excluded: its wall time is the centralized
    initialization, not a steady-state solve.
    """
    counts = log.flags[1:-1].sum(axis=1).astype(int)
    walls = log.wall_times[1:-1].mean(axis=1)
    return {
        int(c): float(walls[counts == c].mean()) for c in np.unique(counts)
    }


def compare(log_a, log_b) -> ComparisonReport:
    """Compare two logs of the same scenario on the same sample grid."""
    if not isinstance(log_a, TrajectoryLog):
        log_a = TrajectoryLog.read_csv(log_a)
    if not isinstance(log_b, TrajectoryLog):
        log_b = TrajectoryLog.read_csv(log_b)
    if log_a.scenario_hash != log_b.scenario_hash:
        raise DecmpcError(
            "logs describe different scenarios: "
            f"{log_a.scenario_hash} vs {log_b.scenario_hash}"
        )
    if log_a.time.shape != log_b.time.shape or not np.array_equal(log_a.time, log_b.time):
        raise DecmpcError("logs do not share the sample grid")
    diff = lateral_difference_series(log_a, log_b)
    max_diff = float(diff.max())
    denom = float(np.abs(log_a.states[:, :, 1]).max())
    percent = 100.0 * max_diff / denom if denom > 0 else 0.0
    wall_a = log_a.wall_times[1:-1]
    wall_b = log_b.wall_times[1:-1]
    return ComparisonReport(
        scenario_hash=log_a.scenario_hash,
        mode_a=log_a.mode,
        mode_b=log_b.mode,
        max_lateral_difference=max_diff,
        max_lateral_difference_percent=percent,
        mean_wall_a=float(wall_a.mean()),
        max_wall_a=float(wall_a.max()),
        mean_wall_b=float(wall_b.mean()),
        max_wall_b=float(wall_b.max()),
        wall_by_active_count_a=_wall_buckets(log_a),
        wall_by_active_count_b=_wall_buckets(log_b),
    )


def timing_profile(log, agent: int = 0) -> dict[int, dict[str, float]]:
    """Per-step wall time of one agent bucketed by its active couplings.

    Only meaningful for decentralized logs, where each agent has its own
    solver column; a centralized log has no per-agent activation zones
    and is refused.  Sample 0 (initialization) and the terminal sample
    (no solve) are excluded.
    """
    if not isinstance(log, TrajectoryLog):
        log = TrajectoryLog.read_csv(log)
    if log.mode != "decentralized":
        raise DecmpcError("timing profile requires a decentralized log")
    if not 0 <= agent < log.n_agents:
        raise DecmpcError(f"agent {agent} not in log")
    involved = [
        j for j, pair in enumerate(log.constraint_pairs) if agent in pair
    ]
    counts = log.flags[1:-1, involved].sum(axis=1).astype(int)
    walls = log.wall_times[1:-1, agent]
    iters = log.gmres_iters[1:-1, agent]
    table: dict[int, dict[str, float]] = {}
    for c in np.unique(counts):
        mask = counts == c
        table[int(c)] = {
            "samples": int(mask.sum()),
            "mean_wall": float(walls[mask].mean()),
            "max_wall": float(walls[mask].max()),
            "mean_iters": float(iters[mask].mean()),
        }
    return table


def timing_profile_csv(table: dict[int, dict[str, float]]) -> str:
    lines = ["active_count,samples,mean_wall,max_wall,mean_iters"]
    for count in sorted(table):
        row = table[count]
        lines.append(
            f"{count},{row['samples']},{row['mean_wall']!r},"
            f"{row['max_wall']!r},{row['mean_iters']!r}"
        )
    return "\n".join(lines) + "\n"


def emit_plot_data(log: TrajectoryLog, directory) -> list[Path]:
    """Write tidy per-figure CSV series for external plotting."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    path = directory / "trajectories.csv"
    cols = ["time"]
    for i in range(log.n_agents):
        cols += [f"s{i}", f"y{i}"]
    lines = [",".join(cols)]
    for k in range(log.time.size):
        row = [repr(float(log.time[k]))]
        for i in range(log.n_agents):
            row += [repr(float(log.states[k, i, 0])), repr(float(log.states[k, i, 1]))]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    path = directory / "activation_trace.csv"
    cols = ["time"] + [f"active{j}" for j in range(len(log.constraint_pairs))]
    lines = [",".join(cols)]
    for k in range(log.time.size):
        row = [repr(float(log.time[k]))]
        row += [str(int(v)) for v in log.flags[k]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    path = directory / "solver_wall_times.csv"
    cols = ["time"] + [f"wall{i}" for i in range(log.n_units)]
    lines = [",".join(cols)]
    for k in range(log.time.size):
        row = [repr(float(log.time[k]))]
        row += [repr(float(v)) for v in log.wall_times[k]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    if log.mode == "decentralized":
        path = directory / "timing_zones.csv"
        path.write_text(timing_profile_csv(timing_profile(log)))
        written.append(path)
    return written
