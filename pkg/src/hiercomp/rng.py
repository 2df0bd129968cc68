"""Reproducible random streams.

Every stochastic routine in the package takes an :class:`RngStream` (or a
``numpy.random.Generator`` derived from one).  Streams are identified by a
seed plus a path of integer keys, so that independent sub-streams (per chain,
per experiment replicate, per worker) never overlap and do not depend on the
order in which they are created.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by ``(seed, stream_id, path)``.

    Parameters
    ----------
    seed : int
        Root seed of the run.
    stream_id : int
        Identifier of the top-level stream (e.g. chain index).
    path : tuple of int
        Additional keys addressing a sub-stream.
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if int(self.seed) < 0 or int(self.stream_id) < 0:
            raise ValueError("seed and stream_id must be non-negative integers")

    def child(self, *keys: int) -> "RngStream":
        """Return the sub-stream addressed by appending ``keys`` to the path."""
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),) + self.path)

    def generator(self) -> np.random.Generator:
        """Fresh Philox generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(self.seed_sequence()))


def as_generator(rng) -> np.random.Generator:
    """Coerce an ``RngStream``, ``Generator`` or integer seed into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None:
        raise ValueError("an explicit seed or stream is required")
    return RngStream(int(rng)).generator()
