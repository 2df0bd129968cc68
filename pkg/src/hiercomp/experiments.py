"""Built-in experiments: IAT versus data size, cost scaling, factor thresholding.

Every experiment is a pure function of its config, so repeated runs produce
identical tables.  Each returns an :class:`ExperimentResult` holding named
tables (header plus rows) and the warnings raised along the way.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .crossed_gibbs import GibbsConfig, run_crossed_chain
from .designs import gen_mcar, gen_worst_case
from .diagnostics import cost_gibbs, iat
from .models import CrossedHyper, ValidationError
from .rng import RngStream
from .sparse_factor import (BlockGraph, assemble_Q_crossed, max_thresholdable_fraction, numeric_cholesky,
                            ordering_crossed_default, symbolic_analysis, thresholding_curve)


@dataclass
class ExperimentResult:
    name: str
    config: dict
    tables: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def _pmap(fn, tasks, threads: int):
    """Ordered map, in worker processes when ``threads > 1``."""
    tasks = list(tasks)
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks))


def _cap_sizes(sizes, cap, default, log):
    kept = [int(I) for I in sizes if int(I) <= cap]
    if len(kept) < len(sizes):
        dropped = sorted(set(int(I) for I in sizes) - set(kept))
        log.append(f"sizes {dropped} exceed the desk-scale limit {cap} and were dropped")
    if not kept and sizes:
        log.append(f"no feasible size left; using the default {list(default)}")
        kept = list(default)
    return kept


def _loglog_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0]) if len(x) > 1 else float("nan")


# ----------------------------------------------------------------------------
# IAT versus size

@dataclass
class IatConfig:
    """Chains on MCAR designs of growing size."""

    sizes: list = field(default_factory=lambda: [25, 50, 100])
    pi: float = 0.1
    likelihoods: list = field(default_factory=lambda: ["gaussian", "binomial"])
    samplers: list = field(default_factory=lambda: ["collapsed", "vanilla"])
    seeds: int = 10
    method: str = "mh"
    kernel: str = "auto"
    n_iter: int = 4000
    n_burn: int = 400
    max_size: int = 400


IAT_COLUMNS = ["a0[0]", "mean_a1[0]", "mean_a2[0]", "inv_prec1[0]", "inv_prec2[0]"]


def _iat_task(task):
    lik, sampler, I, seed, cfg, base = task
    stream = RngStream(base, path=(I, seed))
    design = gen_mcar(I, K=2, pi=cfg["pi"], seed=stream.child(0).generator(), likelihood=lik)
    hyper = CrossedHyper.default(design, prec=1.0, tau=1.0)
    conf = GibbsConfig(n_iter=cfg["n_iter"], n_burn=cfg["n_burn"], sampler=sampler, method=cfg["method"],
                       kernel=cfg["kernel"], update_hypers=True,
                       update_tau=False, clock="virtual")
    trace, _, _ = run_crossed_chain(design, hyper, conf, stream.child(1 + (sampler == "vanilla")).generator())
    return [lik, sampler, I, seed, design.N] + [iat(trace.column(c)) for c in IAT_COLUMNS]


def run_iat_vs_size(cfg: IatConfig, seed: int = 0, threads: int = 1) -> ExperimentResult:
    res = ExperimentResult("fig3", asdict(cfg))
    sizes = _cap_sizes(cfg.sizes, cfg.max_size, [25, 50, 100], res.warnings)
    c = asdict(cfg)
    tasks = [(lik, smp, I, s, c, seed) for lik in cfg.likelihoods for smp in cfg.samplers
             for I in sizes for s in range(cfg.seeds)]
    rows = _pmap(_iat_task, tasks, threads)
    names = [n.split("[")[0] for n in IAT_COLUMNS]
    res.tables["fig3_runs.csv"] = (["likelihood", "sampler", "I", "seed", "N"] + [f"iat_{n}" for n in names], rows)
    summary = []
    for lik in cfg.likelihoods:
        for smp in cfg.samplers:
            for I in sizes:
                sel = np.array([r[5:] for r in rows if r[0] == lik and r[1] == smp and r[2] == I], dtype=float)
                N = np.mean([r[4] for r in rows if r[0] == lik and r[1] == smp and r[2] == I])
                summary.append([lik, smp, I, float(N)] + [float(v) for v in sel.mean(axis=0)])
    res.tables["fig3.csv"] = (["likelihood", "sampler", "I", "mean_N"] + [f"iat_{n}" for n in names], summary)
    return res


# ----------------------------------------------------------------------------
# cost scaling

@dataclass
class CostConfig:
    """Cost(SLA) and Cost(Gibbs) on MCAR designs of one scenario."""

    scenario: str = "a"
    sizes: list = field(default_factory=lambda: [16, 32, 64, 128])
    seeds: int = 10
    max_size: int = 128


def _cost_task(task):
    scenario, I, seed, base = task
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        design = gen_mcar(I, scenario=scenario, clip=True, seed=RngStream(base, path=(I, seed)).generator())
    hyper = CrossedHyper.default(design, prec=1.0, tau=1.0)
    Q = assemble_Q_crossed(design, hyper)
    sym = symbolic_analysis(BlockGraph.from_matrix(Q), ordering_crossed_default(design), L=design.D)
    cg = cost_gibbs(design, hyper)
    return ([I, seed, design.N, sym.n_Q, sym.n_L, sym.predicted_flops, cg["cost"], cg["relaxation_time"]],
            [str(w.message) for w in caught])


def run_cost_scaling(cfg: CostConfig, seed: int = 0, threads: int = 1) -> ExperimentResult:
    res = ExperimentResult(f"fig4{cfg.scenario}", asdict(cfg))
    sizes = _cap_sizes(cfg.sizes, cfg.max_size, [16, 32, 64], res.warnings)
    out = _pmap(_cost_task, [(cfg.scenario, I, s, seed) for I in sizes for s in range(cfg.seeds)], threads)
    rows = [r for r, _ in out]
    for _, ws in out:
        for w in ws:
            if w not in res.warnings:
                res.warnings.append(w)
    res.tables[f"fig4{cfg.scenario}_runs.csv"] = (
        ["I", "seed", "N", "n_Q", "n_L", "cost_sla", "cost_gibbs", "relaxation_time"], rows)
    summary = []
    for I in sizes:
        sel = np.array([r[2:] for r in rows if r[0] == I], dtype=float)
        m = sel.mean(axis=0)
        summary.append([I, float(m[0]), float(m[3]), float(m[4])])
    res.tables[f"fig4{cfg.scenario}.csv"] = (["I", "E[N]", "cost_sla_mean", "cost_gibbs_mean"], summary)
    return res


def cost_slopes(result: ExperimentResult) -> dict:
    """Log-log slopes of mean Cost(SLA) and Cost(Gibbs) against mean N."""
    _, rows = result.tables[f"{result.name}.csv"]
    N = [r[1] for r in rows]
    return {"sla": _loglog_slope(N, [r[2] for r in rows]), "gibbs": _loglog_slope(N, [r[3] for r in rows])}


# ----------------------------------------------------------------------------
# thresholding

@dataclass
class ThresholdConfig:
    """Thresholded factors of the worst-case design."""

    sizes: list = field(default_factory=lambda: [100, 500, 1000])
    d: int = 3
    fractions: list = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])
    tol: float = 1e-6
    prec: float = 1.0
    tau: float = 1.0
    max_size: int = 2000


def _threshold_task(task):
    I, cfg, base = task
    design = gen_worst_case(I, cfg["d"], seed=RngStream(base, path=(I,)).generator())
    hyper = CrossedHyper.default(design, prec=cfg["prec"], prior_prec=1.0, tau=cfg["tau"])
    Q = assemble_Q_crossed(design, hyper)
    sym = symbolic_analysis(BlockGraph.from_matrix(Q), ordering_crossed_default(design))
    fac = numeric_cholesky(Q, sym)
    curve = thresholding_curve(fac, Q, cfg["fractions"])
    best = max_thresholdable_fraction(fac, Q, cfg["tol"])
    return curve, [I, design.mean_degree, sym.n_L, cfg["tol"], best]


def run_thresholding(cfg: ThresholdConfig, seed: int = 0, threads: int = 1) -> ExperimentResult:
    res = ExperimentResult("fig7", asdict(cfg))
    sizes = _cap_sizes(cfg.sizes, cfg.max_size, [100, 500, 1000], res.warnings)
    out = _pmap(_threshold_task, [(I, asdict(cfg), seed) for I in sizes], threads)
    curve_rows = [[I, float(f), float(e)] for I, (curve, _) in zip(sizes, out) for f, e in zip(cfg.fractions, curve)]
    res.tables["fig7.csv"] = (["I", "threshold_fraction", "rel_error"], curve_rows)
    res.tables["fig7_max_fraction.csv"] = (["I", "mean_degree", "n_L", "tol", "max_fraction"], [b for _, b in out])
    return res


EXPERIMENTS = {
    "fig3": (IatConfig, run_iat_vs_size),
    "fig4a": (lambda **kw: CostConfig(scenario="a", **kw), run_cost_scaling),
    "fig4b": (lambda **kw: CostConfig(scenario="b", **kw), run_cost_scaling),
    "fig4c": (lambda **kw: CostConfig(scenario="c", **kw), run_cost_scaling),
    "fig7": (ThresholdConfig, run_thresholding),
}


def run_experiment(name: str, params: dict | None = None, seed: int = 0, threads: int = 1) -> ExperimentResult:
    """Run a built-in experiment by name with config overrides ``params``."""
    try:
        make, fn = EXPERIMENTS[name]
    except KeyError:
        raise ValidationError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}") from None
    try:
        cfg = make(**(params or {}))
    except TypeError as e:
        raise ValidationError(f"bad parameters for {name}: {e}") from None
    return fn(cfg, seed=seed, threads=threads)
