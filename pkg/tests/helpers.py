"""Random instance generators shared by the test modules."""

import numpy as np

from dignn.graph import build_graph, is_bipartite, is_connected
from dignn.laplacian import GeometryParams, Kind, build_canonical, build_parameterized, to_dense

ALL_KINDS = (Kind.UNNORMALIZED, Kind.RANDOM_WALK, Kind.NORMALIZED, Kind.PARAMETERIZED)


def random_connected_graph(rng, n, extra=1.5, weighted=True, max_tries=100):
    """Random spanning tree plus about ``extra * n`` random chords."""
    for _ in range(max_tries):
        order = rng.permutation(n)
        edges = []
        for k in range(1, n):
            edges.append((int(order[k]), int(order[rng.integers(k)])))
        for _ in range(int(extra * n)):
            i, j = rng.integers(n, size=2)
            if i != j:
                edges.append((int(i), int(j)))
        if weighted:
            edges = [(i, j, float(rng.uniform(0.2, 2.0))) for i, j in edges]
        g = build_graph(n, edges)
        if is_connected(g):
            return g
    raise RuntimeError("could not draw a connected graph")


def random_non_bipartite_graph(rng, n, **kw):
    while True:
        g = random_connected_graph(rng, n, **kw)
        if not is_bipartite(g):
            return g


def random_operator(rng, g, kind, dim=3):
    """Operator of ``kind``; parameterized ones use random features and geometry."""
    kind = Kind(kind)
    if kind is Kind.PARAMETERIZED:
        X = rng.standard_normal((g.num_nodes, dim))
        p = GeometryParams.init(dim, rng)
        return build_parameterized(g, X, p)
    return build_canonical(g, kind)


def dense_lambda_max(op):
    """Largest eigenvalue from a dense eigensolve (Delta has a real spectrum)."""
    return float(np.max(np.linalg.eigvals(to_dense(op)).real))


def chi_norm(F, chi):
    F = np.asarray(F).reshape(len(chi), -1)
    return float(np.sqrt(np.sum(chi[:, None] * F * F)))
