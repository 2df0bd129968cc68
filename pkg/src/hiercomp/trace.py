"""MCMC trace container shared by the samplers, the diagnostics and the CLI."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .io import read_csv_table, write_csv
from .models import ValidationError


@dataclass
class ChainTrace:
    """Post-burn-in draws of a chain.

    Attributes
    ----------
    names : list of str
        Monitored quantities, one per column of ``draws``.
    draws : ndarray, shape (n, P)
    iterations : ndarray of int
        Sweep number of every stored draw (counting burn-in sweeps).
    wall_time : ndarray
        Seconds elapsed since the start of the run (burn-in and adaptation
        included) when each draw was stored.
    adapt_boundary : int
        Number of burn-in sweeps, during which step sizes were adapted.
    initial : ndarray, shape (P,)
        Monitored quantities at the initial state.
    info : dict
        Sampler-specific summaries (acceptance rates, clock, flop count).
    """

    names: list
    draws: np.ndarray
    iterations: np.ndarray
    wall_time: np.ndarray
    adapt_boundary: int = 0
    initial: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float).reshape(-1, len(self.names))
        self.iterations = np.asarray(self.iterations, dtype=np.int64)
        self.wall_time = np.asarray(self.wall_time, dtype=float)
        if self.iterations.shape[0] != self.draws.shape[0] or self.wall_time.shape[0] != self.draws.shape[0]:
            raise ValidationError("trace columns disagree on the number of draws")
        if self.iterations.size and self.adapt_boundary > self.iterations[-1]:
            raise ValidationError("adaptation boundary exceeds the iteration count")

    @property
    def n(self) -> int:
        return self.draws.shape[0]

    @property
    def total_time(self) -> float:
        return float(self.wall_time[-1]) if self.n else 0.0

    def column(self, name: str) -> np.ndarray:
        try:
            return self.draws[:, self.names.index(name)]
        except ValueError:
            raise ValidationError(f"trace has no column {name!r}") from None

    def to_csv(self, path) -> None:
        rows = ([int(i), float(t)] + [float(v) for v in row]
                for i, t, row in zip(self.iterations, self.wall_time, self.draws))
        write_csv(path, ["iteration", "wall_time_s"] + list(self.names), rows)

    @classmethod
    def from_csv(cls, path) -> "ChainTrace":
        header, rows = read_csv_table(path)
        if header[:2] != ["iteration", "wall_time_s"]:
            raise ValidationError("trace CSV must start with iteration,wall_time_s columns")
        try:
            arr = np.array([[float(x) for x in r] for r in rows], dtype=float).reshape(len(rows), len(header))
        except ValueError as e:
            raise ValidationError(f"non-numeric trace entry: {e}") from None
        return cls(names=header[2:], draws=arr[:, 2:], iterations=arr[:, 0].astype(np.int64),
                   wall_time=arr[:, 1])
