"""Command-line front end.

Every subcommand merges built-in defaults, an optional JSON config file and
command-line flags (in increasing precedence), writes its results under
``--out`` and exits with 0 on success, 1 on usage or I/O errors and 2 when a
domain condition is not met (ill-posed mu, bipartite graph, no convergence,
gradient check failure).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as data_mod
from .equilibrium import (
    ConstraintSet,
    build_constrained_system,
    build_markov,
    solve_constrained,
    solve_direct,
    solve_implicit_layer,
)
from .errors import (
    BipartiteGraph,
    DignnError,
    Disconnected,
    InconsistentDimensions,
    IndexOutOfRange,
    NonPositiveWeight,
    ParseError,
    ShapeMismatch,
)
from .graph import Graph, build_graph, from_dense, is_connected, read_edge_list
from .laplacian import CANONICAL_KINDS, GeometryParams, Kind, build_canonical, build_parameterized
from .model import DIGNNModel, grad_check, load_checkpoint, save_checkpoint
from .oversmoothing import check_osi, check_ost, smoothing_trajectory, write_trajectory_csv
from .spectral import certify
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN = 0, 1, 2


class UsageError(Exception):
    pass


# malformed or inconsistent inputs count as usage errors, not domain outcomes
INPUT_ERRORS = (OSError, ParseError, InconsistentDimensions, IndexOutOfRange, NonPositiveWeight,
                ShapeMismatch)


FIXTURES = {
    "k2": lambda: build_graph(2, [(0, 1)]),
    "path3": lambda: build_graph(3, [(0, 1), (1, 2)]),
    "path4": lambda: build_graph(4, [(0, 1), (1, 2), (2, 3)]),
    "triangle": lambda: build_graph(3, [(0, 1), (1, 2), (0, 2)]),
    "triangle_pendant": lambda: build_graph(4, [(0, 1), (1, 2), (0, 2), (0, 3)]),
    "cycle5": lambda: build_graph(5, [(i, (i + 1) % 5) for i in range(5)]),
    "petersen": lambda: build_graph(10, [(i, (i + 1) % 5) for i in range(5)]
                                    + [(5 + i, 5 + (i + 2) % 5) for i in range(5)]
                                    + [(i, i + 5) for i in range(5)]),
}

GRAPH_KEYS = {"graph": None, "fixture": "petersen", "edges": None, "num_nodes": None}
SBM_KEYS = {"n": 200, "k_classes": 2, "p_in": 0.1, "p_out": 0.01, "feature_dim": 16,
            "feature_noise": 1.0}

DEFAULTS = {
    "spectrum": {**GRAPH_KEYS, "kind": "random_walk", "mu": 2.5, "features": None,
                 "feature_dim": 4},
    "solve": {**GRAPH_KEYS, "kind": "random_walk", "mu": 2.5, "tol": 1e-6, "max_iter": 10,
              "features": None, "x": None, "feature_dim": 2, "direct": False},
    "demo-ost": {**GRAPH_KEYS, "kind": "random_walk", "mu": 2.5, "tol": 1e-6,
                 "max_iter": 10000, "constrained": None, "columns": 2,
                 "compare_parameterized": True},
    "demo-osi": {**GRAPH_KEYS, "kind": "random_walk", "tol": 1e-6, "max_iter": 100000,
                 "f0": None, "columns": 1, "steps": 100},
    "gradcheck": {"kinds": ["random_walk", "parameterized"], "num_nodes": 10, "feature_dim": 3,
                  "hidden": 4, "num_classes": 2, "mu": 2.5, "step": 1e-5, "threshold": 1e-4},
    "train": {**SBM_KEYS, "data": None, "kind": "random_walk", "mu": 2.5, "hidden": 64,
              "lr": 0.001, "weight_decay": 0.0, "epochs": 200, "dropout": 0.0, "tol": 1e-6,
              "max_iter": 10, "preprocess_mode": "mlp", "preprocess_layers": 1,
              "batch_norm": True},
    "eval": {"checkpoint": None, "max_iter": None},
    "gen-data": {**SBM_KEYS},
}


# --- configuration ---------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, config_path=None, overrides=None) -> dict:
    """Defaults < config file < overrides. Unknown keys raise :class:`UsageError`."""
    cfg = dict(DEFAULTS[command])
    layers = []
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        layers.append(doc)
    layers.append(overrides or {})
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(layer)
    kinds = [cfg["kind"]] if "kind" in cfg else list(cfg.get("kinds", []))
    valid = {k.value for k in Kind}
    for k in kinds:
        if k not in valid:
            raise UsageError(f"unknown Laplacian kind {k!r}; choose from {', '.join(sorted(valid))}")
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_matrix_csv(path: Path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with path.open("w") as fh:
        for row in M:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def _load_graph(cfg) -> Graph:
    if cfg.get("graph"):
        return read_edge_list(cfg["graph"], cfg.get("num_nodes"))
    if cfg.get("edges") is not None:
        edges = [tuple(e) for e in cfg["edges"]]
        n = cfg.get("num_nodes")
        if n is None:
            n = 1 + max((max(e[0], e[1]) for e in edges), default=-1)
        return build_graph(int(n), edges)
    name = cfg.get("fixture")
    if name not in FIXTURES:
        raise UsageError(f"unknown fixture {name!r}; choose from {', '.join(sorted(FIXTURES))}")
    return FIXTURES[name]()


def _features(cfg, n, rng, key="features", inline="x", dim_key="feature_dim"):
    if cfg.get(key):
        rows = data_mod._read_matrix(cfg[key], float)
        X = np.array(rows, dtype=np.float64)
    elif inline and cfg.get(inline) is not None:
        X = np.array(cfg[inline], dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
    else:
        return rng.standard_normal((n, int(cfg[dim_key])))
    if X.shape[0] != n:
        raise UsageError(f"{X.shape[0]} feature rows for a {n}-node graph")
    return X


def _operator(g, kind, X, rng):
    kind = Kind(kind)
    if kind in CANONICAL_KINDS:
        return build_canonical(g, kind), None
    p = GeometryParams.init(X.shape[1], rng)
    return build_parameterized(g, X, p), p


def _dataset(cfg, seed):
    if cfg.get("data"):
        d = Path(cfg["data"])
        return data_mod.load_dataset(d / "edges.txt", d / "features.csv", d / "labels.csv",
                                     d / "splits.json")
    return data_mod.synth_sbm(int(cfg["n"]), int(cfg["k_classes"]), float(cfg["p_in"]),
                              float(cfg["p_out"]), int(cfg["feature_dim"]),
                              float(cfg["feature_noise"]), seed)


# --- subcommands -------------------------------------------------------------

def cmd_spectrum(cfg, seed, out: Path):
    g = _load_graph(cfg)
    rng = np.random.default_rng(seed)
    X = _features(cfg, g.num_nodes, rng, inline=None)
    op, p = _operator(g, cfg["kind"], X, rng)
    report = certify(op, float(cfg["mu"]), p, seed=seed)
    doc = {"kind": Kind(cfg["kind"]).value, **json.loads(report.to_json())}
    _write_json(out / "spectrum.json", doc)
    return doc, EXIT_OK if report.well_posed else EXIT_DOMAIN


def cmd_solve(cfg, seed, out: Path):
    g = _load_graph(cfg)
    rng = np.random.default_rng(seed)
    X = _features(cfg, g.num_nodes, rng)
    op, _ = _operator(g, cfg["kind"], X, rng)
    mu = float(cfg["mu"])
    if cfg["direct"]:
        Z = solve_direct(op, X, mu)
        doc = {"method": "direct", "converged": True, "z_star": Z.tolist()}
        _write_matrix_csv(out / "z_star.csv", Z)
        _write_json(out / "solve.json", doc)
        return doc, EXIT_OK
    try:
        res = solve_implicit_layer(op, X, mu, float(cfg["tol"]), int(cfg["max_iter"]))
    except DignnError as exc:
        doc = {"method": "fixed_point", "converged": False, "error": str(exc)}
        _write_json(out / "solve.json", doc)
        return doc, EXIT_DOMAIN
    doc = {"method": "fixed_point", **res.to_dict()}
    _write_matrix_csv(out / "z_star.csv", res.z_star)
    with (out / "residuals.csv").open("w") as fh:
        fh.write("iteration,residual\n")
        for t, r in enumerate(res.residual_history, 1):
            fh.write(f"{t},{float(r)!r}\n")
    _write_json(out / "solve.json", doc)
    return doc, EXIT_OK if res.converged else EXIT_DOMAIN


def cmd_demo_ost(cfg, seed, out: Path):
    g = _load_graph(cfg)
    n, c = g.num_nodes, int(cfg["columns"])
    rng = np.random.default_rng(seed)
    nodes = np.arange(n) if cfg["constrained"] is None else np.asarray(cfg["constrained"])
    cs = ConstraintSet(n, nodes, rng.standard_normal((len(nodes), c)))
    X_a, X_b = rng.standard_normal((n, c)), rng.standard_normal((n, c))
    mu, tol, it = float(cfg["mu"]), float(cfg["tol"]), int(cfg["max_iter"])
    fixed = check_ost(g, cfg["kind"], cs, X_a, X_b, mu, tol, it)
    doc = {"kind": Kind(cfg["kind"]).value, "mu": mu, "tol": tol, "fixed": fixed.to_dict()}
    if cfg["compare_parameterized"]:
        p = GeometryParams.init(c, rng)
        par = check_ost(g, Kind.PARAMETERIZED, cs, X_a, X_b, mu, tol, it, geometry=p)
        doc["parameterized"] = par.to_dict()
    _write_json(out / "ost.json", doc)
    ok = fixed.converged and fixed.feature_independent
    return doc, EXIT_OK if ok else EXIT_DOMAIN


def cmd_demo_osi(cfg, seed, out: Path):
    g = _load_graph(cfg)
    rng = np.random.default_rng(seed)
    if cfg["f0"] is not None:
        f0 = np.array(cfg["f0"], dtype=np.float64)
    else:
        f0 = rng.standard_normal((g.num_nodes, int(cfg["columns"])))
    op = build_canonical(g, cfg["kind"])
    markov = build_markov(op)
    try:
        rep = check_osi(markov, f0, float(cfg["tol"]), int(cfg["max_iter"]))
    except (BipartiteGraph, Disconnected) as exc:
        doc = {"error": str(exc)}
        _write_json(out / "osi.json", doc)
        return doc, EXIT_DOMAIN
    write_trajectory_csv(smoothing_trajectory(markov, f0, int(cfg["steps"])),
                         out / "trajectory.csv")
    doc = rep.to_dict()
    _write_json(out / "osi.json", doc)
    return doc, EXIT_OK if rep.rows_identical else EXIT_DOMAIN


def _gradcheck_instance(cfg, seed):
    rng = np.random.default_rng(seed)
    n = int(cfg["num_nodes"])
    while True:
        upper = np.triu(rng.random((n, n)) < 0.35, 1)
        g = from_dense(upper.astype(np.float64))
        if is_connected(g):
            break
    X = rng.standard_normal((n, int(cfg["feature_dim"])))
    y = np.arange(n) % int(cfg["num_classes"])
    return g, X, y


def cmd_gradcheck(cfg, seed, out: Path):
    g, X, y = _gradcheck_instance(cfg, seed)
    groups = {}
    for kind in cfg["kinds"]:
        model = DIGNNModel.create(X.shape[1], int(cfg["hidden"]), int(cfg["num_classes"]),
                                  kind=kind, mu=float(cfg["mu"]), seed=seed, activation="tanh",
                                  tol=1e-12, max_iter=5000)
        groups[Kind(kind).value] = grad_check(model, g, X, y, step=float(cfg["step"]))
    worst = max((e for rep in groups.values() for e in rep.values()), default=0.0)
    doc = {"groups": groups, "max_relative_error": worst, "threshold": float(cfg["threshold"]),
           "passed": bool(worst < float(cfg["threshold"]))}
    _write_json(out / "gradcheck.json", doc)
    return doc, EXIT_OK if doc["passed"] else EXIT_DOMAIN


def cmd_train(cfg, seed, out: Path):
    ds = _dataset(cfg, seed)
    tc = TrainConfig(lr=float(cfg["lr"]), weight_decay=float(cfg["weight_decay"]),
                     epochs=int(cfg["epochs"]), seed=seed, dropout=float(cfg["dropout"]),
                     hidden=int(cfg["hidden"]))
    model = DIGNNModel.create(ds.features.shape[1], tc.hidden, ds.num_classes, kind=cfg["kind"],
                              mu=float(cfg["mu"]), seed=seed, tol=float(cfg["tol"]),
                              max_iter=int(cfg["max_iter"]),
                              preprocess_mode=cfg["preprocess_mode"],
                              preprocess_layers=int(cfg["preprocess_layers"]),
                              batch_norm=bool(cfg["batch_norm"]), dropout=tc.dropout)
    with (out / "metrics.jsonl").open("w") as fh:
        report = train(model, ds, tc, on_epoch=lambda m: fh.write(m.to_json() + "\n"))
    run = {"command": "train", "seed": seed, **cfg}
    save_checkpoint(model, out / "checkpoint.json", config=run,
                    rng_state={"bit_generator": "PCG64", "seed": seed})
    doc = {k: v for k, v in report.to_dict().items() if k != "history"}
    doc["epochs"] = len(report.history)
    _write_json(out / "train.json", doc)
    return doc, EXIT_OK


def cmd_eval(cfg, seed, out: Path):
    path = cfg["checkpoint"] or str(out / "checkpoint.json")
    try:
        model, ckpt = load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None
    run = ckpt.get("config") or {}
    train_cfg = {k: run[k] for k in DEFAULTS["train"] if k in run}
    ds = _dataset({**DEFAULTS["train"], **train_cfg}, int(run.get("seed", seed)))
    mi = cfg["max_iter"]
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    doc = {"checkpoint_sha256": digest, "max_iter": mi if mi is not None else model.max_iter}
    for split in ("train", "val", "test"):
        if ds.mask(split).any():
            doc[f"{split}_acc"] = evaluate(model, ds, split, max_iter=mi)
    _write_json(out / "eval.json", doc)
    return doc, EXIT_OK


def cmd_gen_data(cfg, seed, out: Path):
    ds = _dataset(cfg, seed)
    paths = data_mod.save_dataset(ds, out)
    doc = {"num_nodes": ds.graph.num_nodes, "num_edges": ds.graph.num_edges,
           "num_classes": ds.num_classes, "homophily": data_mod.homophily(ds),
           "files": sorted(Path(p).name for p in paths.values())}
    _write_json(out / "dataset.json", doc)
    return doc, EXIT_OK


COMMANDS = {
    "spectrum": cmd_spectrum,
    "solve": cmd_solve,
    "demo-ost": cmd_demo_ost,
    "demo-osi": cmd_demo_osi,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
}

# flag -> (config key, type); only flags valid for a command are applied
FLAGS = {
    "graph": str, "fixture": str, "kind": str, "mu": float, "tol": float, "max_iter": int,
    "epochs": int, "lr": float, "hidden": int, "checkpoint": str, "data": str,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dignn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file of parameters")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (value parsed as JSON when possible)")
        for flag, typ in FLAGS.items():
            if flag in DEFAULTS[name]:
                p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)
        if "direct" in DEFAULTS[name]:
            p.add_argument("--direct", action="store_true", default=None)
    return parser


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.replace("-", "_")] = _parse_value(value)
    for flag in (*FLAGS, "direct"):
        value = getattr(args, flag, None)
        if value is not None:
            over[flag] = value
    return over


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args.command, args.config, _overrides(args))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            doc, code = COMMANDS[args.command](cfg, args.seed, out)
    except (UsageError, *INPUT_ERRORS) as exc:
        print(f"dignn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DignnError as exc:
        print(f"dignn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ValueError as exc:
        print(f"dignn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(doc, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
