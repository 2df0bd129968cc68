"""Command-line front end.

Every command writes its results plus a ``manifest.json`` recording the
command, its arguments, the seed, the SHA-256 of every input and output and
the library versions.  Outputs carry no timestamps and chains default to the
operation-count clock, so a repeated run with the same seed and config is
byte-identical.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import scipy
import scipy.io
import scipy.sparse.linalg

from . import __version__
from .crossed_gibbs import GibbsConfig, run_crossed_chain
from .designs import gen_circulant, gen_mcar, gen_worst_case
from .diagnostics import acf, moment_errors, summarize_trace
from .experiments import run_experiment
from .io import (load_crossed_design, load_nested_tree, sha256_file, write_crossed_design,
                 write_csv, write_json)
from .models import CrossedHyper, Likelihood, NumericalError, ValidationError
from .nested_bp import NestedConfig, run_nested_chain
from .rng import RngStream
from .sparse_factor import (BlockGraph, assemble_Q_crossed, assemble_Q_nested, block_matrix_from_scipy,
                            get_ordering, numeric_cholesky, symbolic_analysis)
from .trace import ChainTrace

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _versions() -> dict:
    return {"hiercomp": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from None


def _split_config(raw: dict, cls, extra=()) -> tuple:
    """Dataclass config from a JSON dict; unknown keys are an error."""
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names - set(extra)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return cls(**{k: v for k, v in raw.items() if k in names}), {k: raw[k] for k in extra if k in raw}


def _manifest(out: Path, name: str, command: str, args: dict, inputs: list, outputs: list,
              warn: list | None = None, extra: dict | None = None) -> None:
    doc = {"command": command, "arguments": args, "seed": args.get("seed"), "versions": _versions(),
           "inputs": {str(p): sha256_file(p) for p in inputs if p is not None},
           "outputs": {Path(p).name: sha256_file(p) for p in outputs},
           "warnings": list(warn or [])}
    if extra:
        doc.update(extra)
    write_json(doc, out / name)


def _out_dir(args) -> Path:
    if args.out is None:
        raise ValidationError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _arg_record(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


# ----------------------------------------------------------------------------
# commands

def cmd_fit_crossed(args) -> None:
    design = load_crossed_design(args.data, args.schema)
    raw = _read_json(args.config)
    raw.setdefault("clock", "virtual")
    config, extra = _split_config(raw, GibbsConfig, extra=("hyper",))
    h = extra.get("hyper", {})
    unknown = set(h) - {"prec", "prior_prec", "tau"}
    if unknown:
        raise ValidationError(f"unknown hyper keys: {sorted(unknown)}")
    hyper = CrossedHyper.default(design, prec=float(h.get("prec", 1.0)), prior_prec=float(h.get("prior_prec", 0.0)),
                                 tau=float(h.get("tau", 1.0)))
    trace, state, hyper = run_crossed_chain(design, hyper, config, RngStream(args.seed).generator())
    out = _out_dir(args)
    trace.to_csv(out / "trace.csv")
    write_json({"N": design.N, "p": design.p, "K": design.K, "likelihood": design.likelihood,
                "parameters": summarize_trace(trace)}, out / "summary.json")
    write_json({"sampler": trace.info["sampler"], "method": trace.info["method"],
                "acceptance": trace.info["acceptance"], "flops": trace.info["flops"],
                "final_step_sizes": {"a0": state.delta0,
                                     **{f"a{k + 1}": np.asarray(d).tolist() for k, d in enumerate(state.delta)}}},
               out / "kernel_report.json")
    outputs = [out / n for n in ("trace.csv", "summary.json", "kernel_report.json")]
    schema = args.schema if args.schema is not None else Path(args.data).with_suffix(".schema.json")
    _manifest(out, "manifest.json", "fit-crossed", _arg_record(args),
              [args.data, schema if Path(schema).exists() else None, args.config], outputs)


def cmd_fit_nested(args) -> None:
    tree = load_nested_tree(args.model)
    raw = _read_json(args.config)
    clock = raw.pop("clock", "virtual")
    if clock not in ("wall", "virtual"):
        raise ValidationError(f"unknown clock {clock!r}")
    config, _ = _split_config(raw, NestedConfig)
    trace, final = run_nested_chain(tree, config, RngStream(args.seed).generator(), clock=clock)
    out = _out_dir(args)
    trace.to_csv(out / "trace.csv")
    write_json({"p": tree.p, "L": tree.L, "max_depth": tree.max_depth, "parameters": summarize_trace(trace)},
               out / "summary.json")
    write_json({"iteration": trace.iterations, "log_evidence": trace.column("log_evidence")},
               out / "evidence.json")
    outputs = [out / n for n in ("trace.csv", "summary.json", "evidence.json")]
    _manifest(out, "manifest.json", "fit-nested", _arg_record(args), [args.model, args.config], outputs)


def _load_for_cholesky(args):
    if (args.matrix is None) == (args.design is None):
        raise ValidationError("give exactly one of --matrix or --design")
    if args.matrix is not None:
        try:
            A = scipy.io.mmread(args.matrix)
        except (OSError, ValueError) as e:
            raise ValidationError(f"cannot read Matrix Market file {args.matrix}: {e}") from None
        return block_matrix_from_scipy(A, L=args.block_size), None, []
    path = Path(args.design)
    if path.suffix == ".json":
        tree = load_nested_tree(path)
        return assemble_Q_nested(tree), tree, []
    design = load_crossed_design(path, args.schema)
    notes = []
    if design.likelihood is not Likelihood.GAUSSIAN:
        notes.append(f"{design.likelihood.value} design analysed through the Gaussian precision "
                     "with the same sparsity pattern (tau as working precision)")
        design = replace(design, likelihood=Likelihood.GAUSSIAN, responses=np.zeros((design.N, design.D)),
                         response_names=None)
    h = _read_json(args.config)
    hyper = CrossedHyper.default(design, prec=float(h.get("prec", 1.0)), prior_prec=float(h.get("prior_prec", 1.0)),
                                 tau=float(h.get("tau", 1.0)))
    return assemble_Q_crossed(design, hyper), design, notes


def _write_block_coordinates(factor, path) -> None:
    """One line per stored block: row col followed by the L*L entries row-major."""
    sym = factor.sym
    lines = [f"% lower block-triangular factor in elimination order: M={sym.M} L={factor.L}"]
    for m in range(sym.M):
        lines.append(" ".join([str(m), str(m)] + [repr(float(v)) for v in np.tril(factor.diag[m]).ravel()]))
        rows, vals = factor.column(m)
        for r, v in zip(rows, vals):
            lines.append(" ".join([str(int(r)), str(m)] + [repr(float(x)) for x in v.ravel()]))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_analyze_cholesky(args) -> None:
    Q, model, notes = _load_for_cholesky(args)
    graph = BlockGraph.from_matrix(Q)
    perm = get_ordering(args.ordering, model, graph)
    sym = symbolic_analysis(graph, perm, L=Q.L)
    out = _out_dir(args)
    summary = sym.summary()
    summary["ordering"] = args.ordering
    write_json(summary, out / "symbolic.json")
    fac = numeric_cholesky(Q, sym)
    Qs = Q.to_scipy()
    idx = (np.asarray(perm)[:, None] * Q.L + np.arange(Q.L)).ravel()
    Lf = fac.to_scipy()
    resid = scipy.sparse.linalg.norm(Qs[idx][:, idx] - Lf @ Lf.T) / max(scipy.sparse.linalg.norm(Qs), 1e-300)
    write_json({"flops_actual": fac.flops_actual, "predicted_flops": sym.predicted_flops,
                "residual": float(resid), "nonzero_blocks": int(sym.n_L)}, out / "numeric.json")
    outputs = [out / "symbolic.json", out / "numeric.json"]
    if args.write_factor:
        _write_block_coordinates(fac, out / "factor.mtx")
        outputs.append(out / "factor.mtx")
    _manifest(out, "manifest.json", "analyze-cholesky", _arg_record(args),
              [args.matrix, args.design, args.config], outputs, warn=notes)


def cmd_gen_design(args) -> None:
    if args.out is None:
        raise ValidationError("--out <csv> is required")
    gen = RngStream(args.seed).generator()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.kind == "circulant":
            design = gen_circulant(args.I, _need(args.d, "--d"), seed=gen, likelihood=args.likelihood)
        elif args.kind == "worst_case":
            design = gen_worst_case(args.I, _need(args.d, "--d"), seed=gen, likelihood=args.likelihood)
        else:
            if args.scenario is None and args.pi is None:
                raise ValidationError("mcar designs need --scenario or --pi")
            design = gen_mcar(args.I, K=args.K, pi=args.pi, scenario=args.scenario, clip=args.clip,
                              seed=gen, likelihood=args.likelihood)
    csv = Path(args.out)
    csv.parent.mkdir(parents=True, exist_ok=True)
    schema = csv.with_suffix(".schema.json")
    write_crossed_design(design, csv, schema)
    _manifest(csv.parent, csv.stem + ".manifest.json", "gen-design", _arg_record(args), [], [csv, schema],
              warn=[str(w.message) for w in caught],
              extra={"design": {"N": design.N, "levels": list(design.levels), "mean_degree": design.mean_degree}})


def _need(value, flag):
    if value is None:
        raise ValidationError(f"{flag} is required for this design kind")
    return value


def cmd_diagnose(args) -> None:
    if args.out is None:
        raise ValidationError("--out <json> is required")
    trace = ChainTrace.from_csv(args.trace)
    max_lag = args.max_lag if args.max_lag is not None else min(100, max(trace.n - 1, 0))
    ref = _read_json(args.reference) if args.reference else None
    summ = summarize_trace(trace)
    doc = {"acf": {n: acf(trace.column(n), max_lag) for n in trace.names},
           "iat": {n: summ[n]["iat"] for n in trace.names},
           "ess": {n: summ[n]["ess"] for n in trace.names},
           "ess_per_sec": {n: summ[n]["ess_per_sec"] for n in trace.names},
           "moment_errors": None}
    if ref is not None:
        means, sds = ref.get("means", {}), ref.get("sds", {})
        common = [n for n in trace.names if n in means and n in sds]
        if not common:
            raise ValidationError("reference shares no parameter with the trace")
        doc["moment_errors"] = moment_errors(np.stack([trace.column(n) for n in common], axis=1),
                                             [means[n] for n in common], [sds[n] for n in common])
        doc["moment_errors"]["parameters"] = common
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(doc, out)
    _manifest(out.parent, out.stem + ".manifest.json", "diagnose", _arg_record(args),
              [args.trace, args.reference], [out])


def cmd_experiment(args) -> None:
    if args.spec is not None:
        spec = _read_json(args.spec)
        runs = spec.get("experiments", [])
        if not isinstance(runs, list):
            raise ValidationError("'experiments' must be a list")
    elif args.name is not None:
        params = args.params
        if params is not None and Path(params).exists():
            params = Path(params).read_text()
        try:
            runs = [{"name": args.name, "params": json.loads(params) if params else {}}]
        except json.JSONDecodeError as e:
            raise ValidationError(f"--params is not valid JSON: {e}") from None
    else:
        raise ValidationError("give --spec <json> or --name <experiment>")
    out = _out_dir(args)
    entries, seen = [], {}
    for run in runs:
        name = run.get("name")
        seen[name] = seen.get(name, 0) + 1
        tag = name if seen[name] == 1 else f"{name}_{seen[name]}"
        res = run_experiment(name, run.get("params", {}), seed=args.seed, threads=args.threads)
        sub = out / tag
        sub.mkdir(exist_ok=True)
        files = {}
        for fname, (header, rows) in sorted(res.tables.items()):
            write_csv(sub / fname, header, rows)
            files[f"{tag}/{fname}"] = sha256_file(sub / fname)
        entries.append({"name": name, "tag": tag, "config": res.config, "warnings": res.warnings,
                        "outputs": files})
    inputs = {str(args.spec): sha256_file(args.spec)} if args.spec else {}
    write_json({"command": "experiment", "arguments": _arg_record(args), "seed": args.seed,
                "versions": _versions(), "inputs": inputs, "experiments": entries}, out / "manifest.json")


# ----------------------------------------------------------------------------
# parser

GLOBAL_DEFAULTS = {"seed": 0, "threads": 1, "out": None}


def _add_globals(p, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, help="base random seed (default 0)", **kw)
    p.add_argument("--threads", type=int, help="worker processes for experiments (default 1)", **kw)
    p.add_argument("--out", help="output directory (or file for gen-design / diagnose)", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiercomp", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-crossed", help="run a Gibbs chain on a crossed design")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--config", help="JSON with chain settings and an optional 'hyper' block")
    p.set_defaults(func=cmd_fit_crossed)

    p = sub.add_parser("fit-nested", help="run the exact-draw Gibbs chain on a nested model")
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_fit_nested)

    p = sub.add_parser("analyze-cholesky", help="symbolic and numeric sparse Cholesky analysis")
    p.add_argument("--matrix", help="symmetric matrix in Matrix Market format")
    p.add_argument("--design", help="crossed design CSV or nested model JSON")
    p.add_argument("--schema")
    p.add_argument("--config", help="JSON with prec, prior_prec, tau for crossed designs")
    p.add_argument("--block-size", type=int, default=1)
    p.add_argument("--ordering", default="natural", choices=["natural", "depth_last", "intercept_last", "rcm"])
    p.add_argument("--write-factor", action="store_true", help="also write factor.mtx")
    p.set_defaults(func=cmd_analyze_cholesky)

    p = sub.add_parser("gen-design", help="generate a crossed design")
    p.add_argument("--kind", required=True, choices=["circulant", "worst_case", "mcar"])
    p.add_argument("--I", type=int, required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--scenario", choices=["a", "b", "c"])
    p.add_argument("--pi", type=float)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--clip", action="store_true", help="clip an observation probability above one")
    p.add_argument("--likelihood", default="gaussian", choices=["gaussian", "binomial"])
    p.set_defaults(func=cmd_gen_design)

    p = sub.add_parser("diagnose", help="autocorrelation diagnostics of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--reference", help="JSON with 'means' and 'sds' keyed by parameter")
    p.add_argument("--max-lag", type=int)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("experiment", help="run built-in experiments")
    p.add_argument("--spec", help="JSON {'experiments': [{'name': ..., 'params': {...}}]}")
    p.add_argument("--name", help="single experiment: fig3, fig4a, fig4b, fig4c or fig7")
    p.add_argument("--params", help="JSON overrides (inline or file) for --name")
    p.set_defaults(func=cmd_experiment)

    for sp_ in sub.choices.values():
        _add_globals(sp_, suppress=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    try:
        args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
