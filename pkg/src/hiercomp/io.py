"""Reading and writing designs, trees and run artefacts.

Crossed designs are stored as a CSV file (one row per observation, one column
per factor label and per response coordinate) plus a JSON schema sidecar that
names the columns, the likelihood and, optionally, the full list of level
labels of each factor.  Labels that appear in the CSV but not in the schema
are appended as new levels.

Nested trees are a single JSON document; see :func:`load_nested_tree`.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .models import CrossedDesign, Likelihood, NestedTree, ValidationError


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Likelihood):
        return obj.value
    return obj


def dumps_canonical(obj) -> str:
    """Byte-stable JSON: sorted keys, fixed indentation, shortest float repr."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps_canonical(obj))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def read_csv_table(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path} is empty")
    return rows[0], rows[1:]


def default_schema_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".schema.json")


def load_crossed_design(csv_path, schema_path=None) -> CrossedDesign:
    """Load a crossed design from CSV plus schema.

    The schema is a JSON object with keys ``factors`` (column names),
    ``responses`` (column names), ``likelihood`` and optionally ``levels``
    (``{factor: [labels...]}``, fixing the level order and declaring levels
    without observations).
    """
    schema_path = default_schema_path(csv_path) if schema_path is None else Path(schema_path)
    try:
        schema = json.loads(Path(schema_path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"schema file {schema_path} not found") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"schema {schema_path} is not valid JSON: {e}") from None
    factors = schema.get("factors")
    responses = schema.get("responses")
    if not factors or not responses:
        raise ValidationError("schema must name 'factors' and 'responses' columns")
    lik = Likelihood.parse(schema.get("likelihood", "gaussian"))
    header, rows = read_csv_table(csv_path)
    col = {name: i for i, name in enumerate(header)}
    missing = [c for c in list(factors) + list(responses) if c not in col]
    if missing:
        raise ValidationError(f"columns {missing} declared in schema but absent from CSV")
    declared = schema.get("levels", {}) or {}
    labels, obs = [], np.zeros((len(rows), len(factors)), dtype=np.int64)
    for k, f in enumerate(factors):
        lab = [str(s) for s in declared.get(f, [])]
        if len(set(lab)) != len(lab):
            raise ValidationError(f"duplicate level labels declared for factor {f}")
        index = {s: i for i, s in enumerate(lab)}
        for j, r in enumerate(rows):
            s = r[col[f]]
            if s not in index:  # unknown label policy: extend
                index[s] = len(lab)
                lab.append(s)
            obs[j, k] = index[s]
        if not lab:
            raise ValidationError(f"factor {f} has no levels")
        labels.append(tuple(lab))
    try:
        y = np.array([[float(r[col[c]]) for c in responses] for r in rows], dtype=float)
    except ValueError as e:
        raise ValidationError(f"non-numeric response: {e}") from None
    y = y.reshape(len(rows), len(responses))
    return CrossedDesign(levels=tuple(len(lab) for lab in labels), obs_levels=obs, responses=y,
                         likelihood=lik, labels=tuple(labels), factor_names=tuple(factors),
                         response_names=tuple(responses))


def write_crossed_design(design: CrossedDesign, csv_path, schema_path=None) -> None:
    """Write ``design`` so that :func:`load_crossed_design` reproduces it exactly."""
    schema_path = default_schema_path(csv_path) if schema_path is None else Path(schema_path)
    factors = list(design.factor_names or [f"factor{k + 1}" for k in range(design.K)])
    responses = list(design.response_names or [f"y{l + 1}" for l in range(design.L)])
    labels = design.labels or tuple(tuple(str(i) for i in range(n)) for n in design.levels)
    rows = []
    for j in range(design.N):
        rows.append([labels[k][design.obs_levels[j, k]] for k in range(design.K)]
                    + [float(v) for v in design.responses[j]])
    write_csv(csv_path, factors + responses, rows)
    write_json({"factors": factors, "responses": responses, "likelihood": design.likelihood.value,
                "levels": {f: list(labels[k]) for k, f in enumerate(factors)}}, schema_path)


def load_nested_tree(path) -> NestedTree:
    """Load a nested model from JSON.

    Document layout::

        {"L": 2,
         "prior": {"mu": [0, 0], "T": [[1, 0], [0, 1]]},     # T all-zero = flat
         "level_sigma": {"1": [[...]], "2": [[...]]},         # keyed by depth
         "nodes": [{"path": [], "X": [[...]], "y": [...], "tau": 1.0},
                   {"path": ["a"], "A": [[...]], "Sigma": [[...]]}, ...]}
    """
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"tree file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"tree file {path} is not valid JSON: {e}") from None
    return tree_from_dict(doc)


def tree_from_dict(doc: dict) -> NestedTree:
    try:
        L = int(doc["L"])
        nodes = doc["nodes"]
    except (KeyError, TypeError):
        raise ValidationError("tree document needs 'L' and 'nodes'") from None
    prior = doc.get("prior", {})
    level_sigma = {int(d): np.asarray(s, dtype=float).reshape(L, L)
                   for d, s in doc.get("level_sigma", {}).items()}
    recs = []
    for rec in nodes:
        r = dict(rec)
        r["path"] = tuple(str(x) for x in rec.get("path", []))
        recs.append(r)
    return NestedTree.from_nodes(recs, L, level_sigma,
                                 mu_prior=np.asarray(prior.get("mu", np.zeros(L)), dtype=float),
                                 T_prior=np.asarray(prior.get("T", np.eye(L)), dtype=float))


def tree_to_dict(tree: NestedTree) -> dict:
    """Inverse of :func:`tree_from_dict` (requires raw ``X``/``y`` blocks)."""
    L = tree.L
    if tree.paths:
        paths = [[str(x) for x in q] for q in tree.paths]
    else:
        paths = [[]]
        for v in range(1, tree.p):
            paths.append(paths[tree.parent[v]] + [str(v)])
    nodes = []
    for v in range(tree.p):
        rec = {"path": paths[v]}
        if v > 0:
            rec["A"] = tree.A[v]
        if tree.X is not None and tree.X[v].shape[0]:
            rec["X"], rec["y"], rec["tau"] = tree.X[v], tree.y[v], float(tree.tau[v])
        if v in tree.sigma_override:
            rec["Sigma"] = tree.sigma_override[v]
        nodes.append(rec)
    return _jsonable({"L": L, "prior": {"mu": tree.mu_prior, "T": tree.T_prior},
                      "level_sigma": {str(d): s for d, s in tree.level_sigma.items()},
                      "nodes": nodes})


def write_nested_tree(tree: NestedTree, path) -> None:
    write_json(tree_to_dict(tree), path)
