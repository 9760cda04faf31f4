"""Immutable undirected weighted graphs in compressed row form."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import InconsistentDimensions, IndexOutOfRange, NonPositiveWeight, ParseError


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph storing both arcs (i, j) and (j, i) of every edge.

    Rows are sorted by neighbor id. Use :func:`build_graph` rather than the
    constructor unless the arrays are already canonical.
    """

    num_nodes: int
    row_offsets: np.ndarray
    neighbor_ids: np.ndarray
    edge_weights: np.ndarray
    arc_sources: np.ndarray = field(init=False, repr=False)
    reverse_arcs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", _frozen(self.row_offsets, np.int64))
        object.__setattr__(self, "neighbor_ids", _frozen(self.neighbor_ids, np.int64))
        object.__setattr__(self, "edge_weights", _frozen(self.edge_weights, np.float64))
        src = np.repeat(np.arange(self.num_nodes), np.diff(self.row_offsets))
        object.__setattr__(self, "arc_sources", _frozen(src, np.int64))
        # position of arc (j, i) for each stored arc (i, j); rows are sorted,
        # so a lexsort on (i, j) of the reversed pairs recovers it
        order = np.lexsort((src, self.neighbor_ids))
        rev = np.empty_like(order)
        rev[order] = np.arange(order.size)
        object.__setattr__(self, "reverse_arcs", _frozen(rev, np.int64))

    @property
    def num_arcs(self) -> int:
        return int(self.neighbor_ids.size)

    @property
    def num_edges(self) -> int:
        return self.num_arcs // 2

    def adjacency(self) -> sparse.csr_matrix:
        n = self.num_nodes
        return sparse.csr_matrix(
            (self.edge_weights, self.neighbor_ids, self.row_offsets), shape=(n, n)
        )

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.arc_sources, self.neighbor_ids] = self.edge_weights
        return a

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_ids[self.row_offsets[i] : self.row_offsets[i + 1]]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.neighbor_ids, other.neighbor_ids)
            and np.array_equal(self.edge_weights, other.edge_weights)
        )

    __hash__ = None


def build_graph(num_nodes, edges) -> Graph:
    """Build a canonical graph from ``(i, j)`` or ``(i, j, w)`` tuples.

    Edges are symmetrized, self-loops dropped and repeated undirected edges
    collapsed by summing their weights, so ``(0, 1)`` and ``(1, 0)`` given
    together produce one edge of weight 2.
    """
    num_nodes = int(num_nodes)
    if num_nodes < 0:
        raise ValueError("num_nodes must be non-negative")
    rows, cols, wts = [], [], []
    for e in edges:
        if len(e) == 2:
            i, j = e
            w = 1.0
        else:
            i, j, w = e
        i, j, w = int(i), int(j), float(w)
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise IndexOutOfRange(f"edge ({i}, {j}) outside [0, {num_nodes})")
        if not w > 0:
            raise NonPositiveWeight(f"edge ({i}, {j}) has weight {w}")
        if i == j:
            continue
        a, b = (i, j) if i < j else (j, i)
        rows.append(a)
        cols.append(b)
        wts.append(w)
    return _from_upper(num_nodes, np.array(rows, dtype=np.int64),
                       np.array(cols, dtype=np.int64), np.array(wts, dtype=np.float64))


def _from_upper(num_nodes, rows, cols, wts) -> Graph:
    # sum duplicates in a fixed order so the result does not depend on input order
    if rows.size:
        order = np.lexsort((cols, rows))
        rows, cols, wts = rows[order], cols[order], wts[order]
        key = rows * max(num_nodes, 1) + cols
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        rows, cols = rows[starts], cols[starts]
        wts = np.add.reduceat(wts, starts)
    src = np.concatenate([rows, cols])
    dst = np.concatenate([cols, rows])
    w = np.concatenate([wts, wts])
    order = np.lexsort((dst, src))
    src, dst, w = src[order], dst[order], w[order]
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
    return Graph(num_nodes, offsets, dst, w)


def from_dense(a) -> Graph:
    a = np.asarray(a, dtype=np.float64)
    iu, ju = np.nonzero(np.triu(a, 1))
    return _from_upper(a.shape[0], iu.astype(np.int64), ju.astype(np.int64), a[iu, ju])


def decompose(g: Graph):
    """Return ``(num_nodes, edges)`` with each undirected edge once (i < j)."""
    keep = g.arc_sources < g.neighbor_ids
    edges = list(zip(g.arc_sources[keep].tolist(), g.neighbor_ids[keep].tolist(),
                     g.edge_weights[keep].tolist()))
    return g.num_nodes, edges


def degrees(g: Graph) -> np.ndarray:
    """Weighted degree D_i = sum_j A_ij."""
    return np.bincount(g.arc_sources, weights=g.edge_weights, minlength=g.num_nodes)


def _components(g: Graph) -> np.ndarray:
    n = g.num_nodes
    label = np.full(n, -1, dtype=np.int64)
    c = 0
    for s in range(n):
        if label[s] >= 0:
            continue
        label[s] = c
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in g.neighbors(u):
                if label[v] < 0:
                    label[v] = c
                    queue.append(v)
        c += 1
    return label


def is_connected(g: Graph) -> bool:
    if g.num_nodes == 0:
        return True
    return bool(_components(g).max() == 0)


def is_bipartite(g: Graph) -> bool:
    color = np.full(g.num_nodes, -1, dtype=np.int8)
    for s in range(g.num_nodes):
        if color[s] >= 0:
            continue
        color[s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in g.neighbors(u):
                if color[v] < 0:
                    color[v] = 1 - color[u]
                    queue.append(v)
                elif color[v] == color[u]:
                    return False
    return True


def block_diagonal(graphs) -> tuple[Graph, np.ndarray]:
    """Disjoint union of ``graphs`` plus the graph index of every node."""
    rows, cols, wts, index = [], [], [], []
    offset = 0
    for k, g in enumerate(graphs):
        keep = g.arc_sources < g.neighbor_ids
        rows.append(g.arc_sources[keep] + offset)
        cols.append(g.neighbor_ids[keep] + offset)
        wts.append(g.edge_weights[keep])
        index.append(np.full(g.num_nodes, k, dtype=np.int64))
        offset += g.num_nodes
    if not graphs:
        return build_graph(0, []), np.zeros(0, dtype=np.int64)
    return (
        _from_upper(offset, np.concatenate(rows), np.concatenate(cols), np.concatenate(wts)),
        np.concatenate(index),
    )


def read_edge_list(path, num_nodes=None) -> Graph:
    """Parse ``i j [w]`` lines; ``#`` starts a comment line.

    The node count is ``num_nodes`` if given, else a ``# num_nodes N`` header,
    else one more than the largest index seen.
    """
    path = Path(path)
    edges = []
    declared = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s.startswith("#"):
                # optional header written by write_edge_list keeps isolated nodes
                head = s[1:].split()
                if len(head) == 2 and head[0] == "num_nodes" and head[1].isdigit():
                    declared = int(head[1])
                continue
            if not s:
                continue
            parts = s.split()
            if len(parts) not in (2, 3):
                raise ParseError(path, lineno, f"expected 'i j [w]', got {s!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if i < 0 or j < 0:
                raise ParseError(path, lineno, "negative node index")
            edges.append((i, j, w))
    if num_nodes is not None and declared is not None and declared != num_nodes:
        raise InconsistentDimensions(f"{path} declares {declared} nodes, expected {num_nodes}")
    if num_nodes is None:
        num_nodes = declared
    if num_nodes is None:
        num_nodes = 1 + max((max(i, j) for i, j, _ in edges), default=-1)
    return build_graph(num_nodes, edges)


def write_edge_list(g: Graph, path) -> None:
    _, edges = decompose(g)
    with Path(path).open("w") as fh:
        fh.write(f"# num_nodes {g.num_nodes}\n")
        for i, j, w in edges:
            fh.write(f"{i} {j} {w!r}\n")
