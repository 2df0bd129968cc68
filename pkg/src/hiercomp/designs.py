"""Design generators and design bookkeeping for crossed models.

All generators return a :class:`~hiercomp.models.CrossedDesign` whose
responses are simulated from the model with every effect (intercept included)
drawn from a standard normal and unit observation precision.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .models import CrossedDesign, Likelihood, ValidationError
from .rng import as_generator

MCAR_SCENARIOS = {
    "a": (2, lambda I: 20.0 / I),
    "b": (2, lambda I: I ** -0.5),
    "c": (5, lambda I: I ** (-5 + 1.5)),
}


@dataclass
class SufficientStats:
    """Level counts and pairwise co-occurrence tables of a design."""

    counts: list
    pair_counts: dict
    mean_degree: float

    def cooccurrence(self, k: int, l: int) -> sp.csr_matrix:
        if (k, l) in self.pair_counts:
            return self.pair_counts[(k, l)]
        return self.pair_counts[(l, k)].T.tocsr()


def cooccurrence_counts(design: CrossedDesign) -> SufficientStats:
    """Per-level counts ``n_i^(k)`` and co-occurrence matrices ``n_ij^(kl)``."""
    obs = design.obs_levels
    counts = [np.bincount(obs[:, k], minlength=I) for k, I in enumerate(design.levels)]
    pairs = {}
    for k in range(design.K):
        for l in range(k + 1, design.K):
            M = sp.coo_matrix((np.ones(design.N), (obs[:, k], obs[:, l])),
                              shape=(design.levels[k], design.levels[l])).tocsr()
            M.sum_duplicates()
            pairs[(k, l)] = M
    return SufficientStats(counts, pairs, design.mean_degree)


def check_balanced_levels(design: CrossedDesign) -> dict:
    """Whether every level of factor ``k`` is observed exactly ``N / I_k`` times."""
    dev = 0.0
    for k, I in enumerate(design.levels):
        n = np.bincount(design.obs_levels[:, k], minlength=I)
        dev = max(dev, float(np.max(np.abs(n - design.N / I))))
    return {"balanced": dev == 0.0, "max_deviation": dev}


def assumption1_report(design: CrossedDesign) -> dict:
    """Edge count of the precision-matrix graph compared with ``N``.

    Every observation creates at most ``K (K + 1) / 2`` distinct edges (one per
    factor to the intercept and one per factor pair), so the edge count is
    ``O(N)`` whenever no level is empty.
    """
    stats = cooccurrence_counts(design)
    cross = sum(int(M.nnz) for M in stats.pair_counts.values())
    to_intercept = sum(int(np.count_nonzero(c)) for c in stats.counts)
    edges = cross + to_intercept
    return {"edges": edges, "N": design.N, "p": design.p,
            "edges_per_observation": edges / design.N if design.N else float("inf")}


def simulate_responses(obs_levels, levels, likelihood, rng, L: int = 1):
    """Draw effects from N(0, 1) and responses given the linear predictor."""
    lik = Likelihood.parse(likelihood)
    rng = as_generator(rng)
    D = L - 1 if lik is Likelihood.MULTINOMIAL else L
    a0 = rng.standard_normal(D)
    effects = [rng.standard_normal((I, D)) for I in levels]
    eta = a0 + sum(e[obs_levels[:, k]] for k, e in enumerate(effects)) if len(obs_levels) else np.zeros((0, D))
    eta = np.asarray(eta).reshape(-1, D)
    if lik is Likelihood.GAUSSIAN:
        y = eta + rng.standard_normal(eta.shape)
    elif lik is Likelihood.BINOMIAL:
        y = (rng.random(eta.shape) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    else:
        full = np.concatenate([eta, np.zeros((eta.shape[0], 1))], axis=1)
        prob = np.exp(full - full.max(axis=1, keepdims=True))
        prob /= prob.sum(axis=1, keepdims=True)
        u = rng.random((eta.shape[0], 1))
        cat = np.minimum((np.cumsum(prob, axis=1) < u).sum(axis=1), L - 1)
        y = np.eye(L)[cat]
    return y, {"a0": a0, "effects": effects}


def design_from_counts(counts, seed=0, likelihood="gaussian", L: int = 1) -> CrossedDesign:
    """Two-factor design with ``counts[i, j]`` observations in cell ``(i, j)``."""
    counts = np.asarray(counts)
    if counts.ndim != 2 or np.any(counts < 0):
        raise ValidationError("counts must be a non-negative matrix")
    i, j = np.nonzero(counts)
    reps = counts[i, j].astype(np.int64)
    obs = np.stack([np.repeat(i, reps), np.repeat(j, reps)], axis=1)
    y, _ = simulate_responses(obs, counts.shape, likelihood, seed, L=L)
    return CrossedDesign(levels=counts.shape, obs_levels=obs, responses=y, likelihood=likelihood)


def circulant_counts(I: int, d: int) -> np.ndarray:
    if d % 2 or d < 0:
        raise ValidationError("circulant designs need an even, non-negative bandwidth d")
    if d >= I:
        raise ValidationError("circulant designs need d < I")
    idx = np.arange(I)
    diff = np.abs(idx[:, None] - idx[None, :])
    circ = np.minimum(diff, I - diff)
    return (circ <= d // 2).astype(np.int64)


def gen_circulant(I: int, d: int, seed=0, likelihood="gaussian") -> CrossedDesign:
    """Balanced two-factor design with ``n_ij = 1`` iff ``|i - j| <= d / 2`` (mod I).

    Every level is observed ``d + 1`` times.
    """
    return design_from_counts(circulant_counts(I, d), seed=seed, likelihood=likelihood)


def worst_case_counts(I: int, d: int) -> np.ndarray:
    """Balanced design with mean degree ``d + 1`` whose factor has quadratic fill.

    Row ``i < I`` (1-based) holds the diagonal plus ``d`` entries that sweep the
    columns cyclically in steps of ``d``; the cyclic offset skips the diagonal.
    The last row completes every column to ``d + 1`` entries.
    """
    if d < 1 or d > I - 2:
        raise ValidationError("worst-case designs need 1 <= d <= I - 2")
    N = np.zeros((I, I), dtype=np.int64)
    for i in range(1, I):
        N[i - 1, i - 1] = 1
        for t in range(d * (i - 1), d * i):
            v = t % (I - 1)
            j = v + 2 if v + 2 > i else v + 1
            N[i - 1, j - 1] = 1
    col = N[: I - 1].sum(axis=0)
    N[I - 1, col <= d] = 1
    return N


def gen_worst_case(I: int, d: int, seed=0, likelihood="gaussian") -> CrossedDesign:
    return design_from_counts(worst_case_counts(I, d), seed=seed, likelihood=likelihood)


def worst_case_fill_lower_bound(I: int, d: int) -> float:
    """Lower bound on the factor size of the worst-case design (intercept last)."""
    return (d - 1) / d * (I * (I + 1) / 2 - 1)


def _distinct_cells(total: int, n: int, rng) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if total <= 5_000_000:
        return np.sort(rng.choice(total, size=n, replace=False))
    cells = np.unique(rng.integers(0, total, size=n))
    while cells.size < n:
        extra = rng.integers(0, total, size=n - cells.size)
        cells = np.unique(np.concatenate([cells, extra]))
    return np.sort(cells)


def mcar_probability(scenario: str, I: int) -> tuple[int, float]:
    try:
        K, f = MCAR_SCENARIOS[scenario]
    except KeyError:
        raise ValidationError(f"unknown MCAR scenario {scenario!r}; use one of a, b, c") from None
    return K, float(f(I))


def gen_mcar(I: int, K: int = 2, pi: float | None = None, seed=0, likelihood="gaussian",
             scenario: str | None = None, clip: bool = False, L: int = 1) -> CrossedDesign:
    """Missing-completely-at-random design on the full ``I^K`` grid.

    Each cell is observed independently with probability ``pi``.  With
    ``scenario`` in ``{"a", "b", "c"}`` both ``K`` and ``pi`` follow the named
    asymptotic regime.  A probability above one is an error unless ``clip``
    is set, in which case it is clipped to one with a warning.
    """
    if scenario is not None:
        K, pi = mcar_probability(scenario, I)
    if pi is None or not np.isfinite(pi) or pi < 0:
        raise ValidationError("pi must be a probability")
    if pi > 1:
        if not clip:
            raise ValidationError(f"pi = {pi:.3g} > 1 for I = {I}; use a larger I")
        warnings.warn(f"pi = {pi:.3g} > 1 for I = {I}; clipped to 1", stacklevel=2)
        pi = 1.0
    rng = as_generator(seed)
    total = int(I) ** int(K)
    n = int(rng.binomial(total, pi))
    cells = _distinct_cells(total, n, rng)
    obs = np.stack(np.unravel_index(cells, (I,) * K), axis=1).astype(np.int64).reshape(-1, K)
    y, _ = simulate_responses(obs, (I,) * K, likelihood, rng, L=L)
    return CrossedDesign(levels=(I,) * K, obs_levels=obs, responses=y, likelihood=likelihood)


def random_balanced_counts(I: int, d: int, rng, J: int | None = None) -> np.ndarray:
    """Sum of random permutation-type matrices: every row sums to ``d`` times
    ``J / gcd``, every column to ``d`` times ``I / gcd``.

    With ``J`` unset the design is square and every level has degree ``d``.
    """
    rng = as_generator(rng)
    J = I if J is None else J
    g = np.gcd(I, J)
    r, c = J // g, I // g
    N = np.zeros((I, J), dtype=np.int64)
    for _ in range(d):
        rows = np.repeat(np.arange(I), r)
        cols = np.repeat(np.arange(J), c)
        rng.shuffle(cols)
        np.add.at(N, (rows, cols), 1)
    return N
