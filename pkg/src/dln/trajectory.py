"""Trajectory records shared by the discrete and continuous engines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .model import CompositeStatistic, eval_composite, statistic_preset

Array = np.ndarray


@dataclass
class TrajectoryRecord:
    """Time-indexed values of registered statistics for one run.

    All values are finite unless the divergence flag is set, in which case
    every statistic is +inf from ``divergence_time`` onward (the run is
    censored, not discarded).
    """

    times: Array
    stats: dict
    run_id: int
    source: str
    diverged: bool = False
    divergence_time: float | None = None
    paths: dict | None = None

    def __post_init__(self):
        n = len(self.times)
        for name, vals in self.stats.items():
            if len(vals) != n:
                raise DimensionError(f"statistic {name!r} misaligned with times")


def default_grid(horizon: float, n: int = 512) -> Array:
    return np.linspace(0.0, float(horizon), n)


def resolve_statistics(stats, config):
    """Accept preset names or CompositeStatistic objects."""
    out = []
    for s in stats:
        if isinstance(s, CompositeStatistic):
            out.append(s)
        else:
            out.append(statistic_preset(str(s), config))
    return out


class Recorder:
    """Accumulates statistic values on a fixed grid with censoring."""

    def __init__(self, grid, statistics, config, instance, record_paths=False):
        self.grid = np.asarray(grid, dtype=float)
        self.statistics = statistics
        self.config = config
        self.instance = instance
        self.values = {s.name: np.empty(len(self.grid)) for s in statistics}
        self.record_paths = record_paths
        if record_paths:
            d = instance.d
            self.u_path = np.empty((len(self.grid), d))
            self.v_path = np.empty((len(self.grid), d))
        self.diverged = False
        self.divergence_time = None

    def record(self, j: int, t: float, x: Array):
        if not self.diverged and not np.all(np.isfinite(x)):
            self.diverged = True
            self.divergence_time = float(t)
        if self.diverged:
            for vals in self.values.values():
                vals[j] = np.inf
            if self.record_paths:
                self.u_path[j] = np.inf
                self.v_path[j] = np.inf
            return
        d = self.instance.d
        for stat in self.statistics:
            self.values[stat.name][j] = eval_composite(
                stat, self.config, self.instance, x
            )
        if self.record_paths:
            self.u_path[j] = x[:d]
            self.v_path[j] = x[d:]

    def finish(self, run_id: int, source: str) -> TrajectoryRecord:
        paths = None
        if self.record_paths:
            paths = {"u": self.u_path, "v": self.v_path}
        return TrajectoryRecord(
            times=self.grid,
            stats=self.values,
            run_id=run_id,
            source=source,
            diverged=self.diverged,
            divergence_time=self.divergence_time,
            paths=paths,
        )
