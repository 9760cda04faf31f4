"""Diagnostics for feature-independent equilibria and collapse under diffusion."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .equilibrium import (
    ConstraintSet,
    MarkovMatrix,
    build_constrained_system,
    build_markov,
    solve_constrained,
    stationary_distribution,
)
from .errors import BipartiteGraph, Disconnected, ShapeMismatch
from .graph import Graph, is_bipartite, is_connected
from .laplacian import CANONICAL_KINDS, GeometryParams, Kind, _as_columns, build_canonical, build_parameterized


@dataclass
class OstReport:
    equilibrium_a: np.ndarray
    equilibrium_b: np.ndarray
    max_abs_difference: float
    feature_independent: bool
    converged: bool

    def to_dict(self):
        return {
            "max_abs_difference": self.max_abs_difference,
            "feature_independent": self.feature_independent,
            "converged": self.converged,
            "equilibrium_a": self.equilibrium_a.tolist(),
            "equilibrium_b": self.equilibrium_b.tolist(),
        }


@dataclass
class OsiReport:
    limit_rows: np.ndarray
    predicted_row: np.ndarray
    max_row_deviation: float
    rows_identical: bool
    iterations: int

    def to_dict(self):
        return {
            "predicted_row": self.predicted_row.tolist(),
            "max_row_deviation": self.max_row_deviation,
            "rows_identical": self.rows_identical,
            "iterations": self.iterations,
            "limit_rows": self.limit_rows.tolist(),
        }


def check_ost(g: Graph, kind, cs: ConstraintSet, X_a, X_b, mu: float, tol: float = 1e-6,
              max_iter: int = 10_000, geometry: GeometryParams | None = None) -> OstReport:
    """Solve the constrained system from features ``X_a`` and ``X_b`` and compare.

    The initial state is the features themselves. For a canonical kind the
    geometry ignores features, so both solves share one system. For the
    parameterized kind each solve builds its own Laplacian from its features.
    """
    kind = Kind(kind)
    X_a = _as_columns(X_a, g.num_nodes, "X_a")
    X_b = _as_columns(X_b, g.num_nodes, "X_b")
    if X_a.shape != cs.padded_targets.shape or X_b.shape != X_a.shape:
        raise ShapeMismatch("features must have one column per target column")
    if kind in CANONICAL_KINDS:
        op = build_canonical(g, kind)
        sys_a = sys_b = build_constrained_system(op, build_markov(op), cs, mu)
    else:
        if geometry is None:
            raise ValueError("parameterized kind needs geometry parameters")
        ops = [build_parameterized(g, X, geometry) for X in (X_a, X_b)]
        sys_a, sys_b = (build_constrained_system(o, build_markov(o), cs, mu) for o in ops)
    ra = solve_constrained(sys_a, tol, max_iter, f0=X_a, check=False)
    rb = solve_constrained(sys_b, tol, max_iter, f0=X_b, check=False)
    diff = float(np.max(np.abs(ra.z_star - rb.z_star))) if ra.z_star.size else 0.0
    return OstReport(ra.z_star, rb.z_star, diff, diff <= 2 * tol, ra.converged and rb.converged)


def check_osi(markov: MarkovMatrix, f0, tol: float = 1e-6, max_iter: int = 100_000) -> OsiReport:
    """Diffuse f <- P f until rows agree and compare with (pi f0)^T.

    pi f is invariant under the iteration and lies between the smallest and
    largest row entry of each column, so once the column spread is below
    ``tol / 10`` every row is within that of the predicted limit.
    """
    g = markov.graph
    if not is_connected(g):
        raise Disconnected("over-smoothing limit needs a connected graph")
    if is_bipartite(g):
        raise BipartiteGraph("graph is bipartite: P is periodic and P^t f does not converge "
                             "(needs a connected, non-bipartite graph)")
    f = _as_columns(f0, g.num_nodes, "f0").copy()
    predicted = stationary_distribution(markov) @ f
    P = markov.matrix()
    it = 0
    while it < max_iter and np.max(np.ptp(f, axis=0)) > tol / 10:
        f = P @ f
        it += 1
    dev = float(np.max(np.abs(f - predicted[None, :])))
    return OsiReport(f, predicted, dev, dev <= tol, it)


def row_variance(f) -> float:
    """Mean squared deviation of rows from the mean row."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    return float(np.mean(np.sum((f - f.mean(axis=0)) ** 2, axis=1)))


def unnormalized_energy(g: Graph, f) -> float:
    f = _as_columns(f, g.num_nodes)
    d = f[g.neighbor_ids] - f[g.arc_sources]
    return 0.5 * float(np.dot(g.edge_weights, np.einsum("ij,ij->i", d, d)))


def smoothing_trajectory(markov: MarkovMatrix, f0, steps: int):
    """``(step, energy, variance)`` for explicit diffusion P^t f0, t = 0..steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    g = markov.graph
    P = markov.matrix()
    f = _as_columns(f0, g.num_nodes, "f0").copy()
    out = [(0, unnormalized_energy(g, f), row_variance(f))]
    for t in range(1, steps + 1):
        f = P @ f
        out.append((t, unnormalized_energy(g, f), row_variance(f)))
    return out


def write_trajectory_csv(series, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "energy", "variance"])
        for step, e, v in series:
            w.writerow([step, repr(float(e)), repr(float(v))])


def report_json(report) -> str:
    return json.dumps(report.to_dict())
