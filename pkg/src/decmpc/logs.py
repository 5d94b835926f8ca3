"""Run logs: per-sample trajectory records with CSV round-trip.

The CSV layout is stable (golden-tested): a ``#``-prefixed header with
the scenario hash, mode, seed, code version, constraint pairs and the
full config echo, followed by one row per sample.  Floats are written
with shortest round-trip ``repr`` so a log replays bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DecmpcError

LOG_FORMAT = "decmpc-log v1"


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def scenario_hash(config_doc: dict) -> str:
    """Deterministic 12-hex identifier of a resolved scenario config."""
    return hashlib.sha256(canonical_json(config_doc).encode()).hexdigest()[:12]


@dataclass
class TrajectoryLog:
    """Time-indexed record of one scenario run.

    Arrays are indexed ``[sample, ...]``; ``states`` is
    ``(K+1, n_agents, 3)``, ``inputs`` ``(K+1, n_agents, 2)``, ``gaps``
    and ``flags`` ``(K+1, n_constraints)`` and the solver columns
    ``(K+1, n_units)`` where a centralized run has one solver unit and a
    decentralized run one per agent.
    """

    mode: str
    seed: int
    code_version: str
    config: dict
    constraint_pairs: list[tuple[int, int]]
    time: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    gaps: np.ndarray
    flags: np.ndarray
    residual_norms: np.ndarray
    gmres_iters: np.ndarray
    wall_times: np.ndarray

    @property
    def scenario_hash(self) -> str:
        return scenario_hash(self.config)

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    @property
    def n_units(self) -> int:
        return self.residual_norms.shape[1]

    def columns(self) -> list[str]:
        cols = ["time"]
        for i in range(self.n_agents):
            cols += [f"s{i}", f"y{i}", f"theta{i}", f"v{i}", f"omega{i}"]
        for j in range(len(self.constraint_pairs)):
            cols += [f"C{j}", f"active{j}"]
        for i in range(self.n_units):
            cols += [f"res{i}", f"iters{i}", f"wall{i}"]
        return cols

    def header_lines(self) -> list[str]:
        return [
            f"# {LOG_FORMAT}",
            f"# scenario_hash: {self.scenario_hash}",
            f"# mode: {self.mode}",
            f"# seed: {self.seed}",
            f"# code_version: {self.code_version}",
            f"# constraints: {json.dumps([list(p) for p in self.constraint_pairs])}",
            f"# config: {canonical_json(self.config)}",
        ]

    def to_csv_text(self) -> str:
        lines = self.header_lines()
        lines.append(",".join(self.columns()))
        k_samples = self.time.shape[0]
        for k in range(k_samples):
            row: list[str] = [repr(float(self.time[k]))]
            for i in range(self.n_agents):
                row += [repr(float(v)) for v in self.states[k, i]]
                row += [repr(float(v)) for v in self.inputs[k, i]]
            for j in range(len(self.constraint_pairs)):
                row.append(repr(float(self.gaps[k, j])))
                row.append(str(int(self.flags[k, j])))
            for i in range(self.n_units):
                row.append(repr(float(self.residual_norms[k, i])))
                row.append(str(int(self.gmres_iters[k, i])))
                row.append(repr(float(self.wall_times[k, i])))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> "TrajectoryLog":
        text = Path(path).read_text()
        header: dict[str, str] = {}
        rows: list[list[str]] = []
        columns: list[str] = []
        for line in text.splitlines():
            if not line:
                continue
            if line.startswith("# "):
                body = line[2:]
                if ": " in body:
                    key, val = body.split(": ", 1)
                    header[key] = val
                continue
            if not columns:
                columns = line.split(",")
                continue
            rows.append(line.split(","))
        if "config" not in header or not columns:
            raise DecmpcError(f"{path} is not a decmpc log")
        config = json.loads(header["config"])
        pairs = [tuple(p) for p in json.loads(header["constraints"])]
        n_agents = sum(1 for c in columns if c.startswith("s") and c[1:].isdigit())
        n_units = sum(1 for c in columns if c.startswith("res"))
        nc = len(pairs)
        k = len(rows)
        data = np.array([[float(v) for v in row] for row in rows])
        at = 0
        time = data[:, at]; at += 1
        states = np.empty((k, n_agents, 3))
        inputs = np.empty((k, n_agents, 2))
        for i in range(n_agents):
            states[:, i] = data[:, at:at + 3]
            inputs[:, i] = data[:, at + 3:at + 5]
            at += 5
        gaps = np.empty((k, nc))
        flags = np.empty((k, nc), dtype=int)
        for j in range(nc):
            gaps[:, j] = data[:, at]
            flags[:, j] = data[:, at + 1].astype(int)
            at += 2
        res = np.empty((k, n_units))
        iters = np.empty((k, n_units), dtype=int)
        wall = np.empty((k, n_units))
        for i in range(n_units):
            res[:, i] = data[:, at]
            iters[:, i] = data[:, at + 1].astype(int)
            wall[:, i] = data[:, at + 2]
            at += 3
        log = cls(
            mode=header.get("mode", "unknown"),
            seed=int(header.get("seed", "0")),
            code_version=header.get("code_version", "unknown"),
            config=config,
            constraint_pairs=pairs,
            time=time,
            states=states,
            inputs=inputs,
            gaps=gaps,
            flags=flags,
            residual_norms=res,
            gmres_iters=iters,
            wall_times=wall,
        )
        recorded = header.get("scenario_hash")
        if recorded and recorded != log.scenario_hash:
            raise DecmpcError(
                f"scenario hash mismatch in {path}: header {recorded}, "
                f"config {log.scenario_hash}"
            )
        return log


class LogBuilder:
    """Accumulates per-sample rows and assembles a TrajectoryLog."""

    def __init__(self, mode, seed, code_version, config, constraint_pairs, n_agents, n_units):
        self.mode = mode
        self.seed = seed
        self.code_version = code_version
        self.config = config
        self.constraint_pairs = list(constraint_pairs)
        self.n_agents = n_agents
        self.n_units = n_units
        self._rows: list[tuple] = []

    def add_sample(self, t, states, inputs, gaps, flags, res, iters, wall) -> None:
        self._rows.append((
            float(t),
            np.array(states, dtype=float).reshape(self.n_agents, 3),
            np.array(inputs, dtype=float).reshape(self.n_agents, 2),
            np.array(gaps, dtype=float).reshape(len(self.constraint_pairs)),
            np.array(flags, dtype=int).reshape(len(self.constraint_pairs)),
            np.array(res, dtype=float).reshape(self.n_units),
            np.array(iters, dtype=int).reshape(self.n_units),
            np.array(wall, dtype=float).reshape(self.n_units),
        ))

    def build(self) -> TrajectoryLog:
        k = len(self._rows)
        nc = len(self.constraint_pairs)
        log = TrajectoryLog(
            mode=self.mode,
            seed=self.seed,
            code_version=self.code_version,
            config=self.config,
            constraint_pairs=self.constraint_pairs,
            time=np.array([r[0] for r in self._rows]),
            states=np.stack([r[1] for r in self._rows]) if k else np.empty((0, self.n_agents, 3)),
            inputs=np.stack([r[2] for r in self._rows]) if k else np.empty((0, self.n_agents, 2)),
            gaps=np.stack([r[3] for r in self._rows]) if k else np.empty((0, nc)),
            flags=np.stack([r[4] for r in self._rows]) if k else np.empty((0, nc), dtype=int),
            residual_norms=np.stack([r[5] for r in self._rows]) if k else np.empty((0, self.n_units)),
            gmres_iters=np.stack([r[6] for r in self._rows]) if k else np.empty((0, self.n_units), dtype=int),
            wall_times=np.stack([r[7] for r in self._rows]) if k else np.empty((0, self.n_units)),
        )
        return log
