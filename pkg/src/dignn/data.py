"""Datasets: file loading, synthetic stochastic block models and splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    ClassTooSmall,
    DisconnectedAfterRetries,
    InconsistentDimensions,
    IndexOutOfRange,
    ParseError,
)
from .graph import Graph, block_diagonal, build_graph, from_dense, is_connected, read_edge_list, write_edge_list

DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class Dataset:
    """Node-level data, or graph-level data when ``graph_index`` is set.

    For graph-level tasks ``graph`` is the block-diagonal union, ``graph_index``
    maps nodes to graphs and labels/masks are indexed by graph.
    """

    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int
    graph_index: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.graph.num_nodes:
            raise InconsistentDimensions(
                f"{self.features.shape[0]} feature rows for {self.graph.num_nodes} nodes")
        units = self.num_units
        if self.labels.shape != (units,):
            raise InconsistentDimensions(f"{self.labels.size} labels for {units} items")
        if units and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != (units,):
                raise InconsistentDimensions(f"{name} has shape {m.shape}, expected ({units},)")
            setattr(self, name, m)
        if np.any(self.train_mask & self.val_mask) or np.any(self.train_mask & self.test_mask) \
                or np.any(self.val_mask & self.test_mask):
            raise ValueError("train/val/test masks overlap")

    @property
    def num_units(self) -> int:
        if self.graph_index is None:
            return self.graph.num_nodes
        return int(self.graph_index.max()) + 1 if self.graph_index.size else 0

    def mask(self, split: str) -> np.ndarray:
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]


def _stratified(labels, fractions, rng):
    n = labels.size
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    need = sum(1 for f in fractions if f > 0)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < need:
            raise ClassTooSmall(f"class {c} has {idx.size} members, need at least {need}")
        idx = idx[rng.permutation(idx.size)]
        start = 0
        for m, f in zip(masks, fractions):
            take = int(round(f * idx.size))
            m[idx[start:start + take]] = True
            start += take
    return masks


def split(ds: Dataset, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> Dataset:
    """Stratified random train/val/test masks."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if sum(fractions) > 1 + 1e-12:
        raise ValueError(f"fractions sum to {sum(fractions)} > 1")
    tr, va, te = _stratified(ds.labels, fractions, np.random.default_rng(seed))
    return replace(ds, train_mask=tr, val_mask=va, test_mask=te)


def homophily(ds: Dataset) -> float:
    """Fraction of edges whose endpoints share a label."""
    g = ds.graph
    if g.num_arcs == 0:
        return float("nan")
    return float(np.mean(ds.labels[g.arc_sources] == ds.labels[g.neighbor_ids]))


def _sample_sbm_graph(labels, p_in, p_out, rng) -> Graph:
    n = labels.size
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n, n)) < prob
    return from_dense(np.triu(draw, 1).astype(np.float64))


def synth_sbm(n: int, k_classes: int, p_in: float, p_out: float, feature_dim: int = 16,
              feature_noise: float = 1.0, seed: int = 0, max_retries: int = 100,
              fractions=DEFAULT_FRACTIONS) -> Dataset:
    """Connected stochastic block model with Gaussian class-mean features.

    Classes are balanced. Feature rows are the class mean (standard normal,
    drawn once) plus ``feature_noise`` times standard normal noise. Edge
    sampling is repeated until the graph is connected.
    """
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name}={p} is not a probability")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % k_classes)[rng.permutation(n)]
    means = rng.standard_normal((k_classes, feature_dim))
    features = means[labels] + feature_noise * rng.standard_normal((n, feature_dim))
    for _ in range(max_retries):
        g = _sample_sbm_graph(labels, p_in, p_out, rng)
        if is_connected(g):
            break
    else:
        raise DisconnectedAfterRetries(f"no connected sample in {max_retries} attempts")
    empty = np.zeros(n, dtype=bool)
    ds = Dataset(g, features, labels, empty, empty.copy(), empty.copy(), k_classes)
    return split(ds, fractions, seed)


def synth_graph_classification(num_graphs: int = 40, nodes: int = 12, feature_dim: int = 4,
                               seed: int = 0, fractions=DEFAULT_FRACTIONS) -> Dataset:
    """Two-class graph-level task: sparse graphs versus dense graphs.

    Node features are constant ones plus small noise, so the class signal sits
    in the structure and in the aggregated degree profile.
    """
    rng = np.random.default_rng(seed)
    labels = (np.arange(num_graphs) % 2)[rng.permutation(num_graphs)]
    graphs, feats = [], []
    for y in labels:
        p = 0.5 if y else 0.15
        while True:
            g = from_dense(np.triu(rng.random((nodes, nodes)) < p, 1).astype(np.float64))
            if is_connected(g):
                break
        graphs.append(g)
        deg = np.bincount(g.arc_sources, minlength=nodes).astype(np.float64)
        f = np.ones((nodes, feature_dim)) + 0.1 * rng.standard_normal((nodes, feature_dim))
        f[:, 0] = deg / nodes
        feats.append(f)
    g, index = block_diagonal(graphs)
    tr, va, te = _stratified(labels, fractions, rng)
    return Dataset(g, np.vstack(feats), labels, tr, va, te, 2, index)


def _read_matrix(path, dtype):
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                rows.append([dtype(x) for x in s.split(",")])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(path, lineno, f"expected {len(rows[0])} columns")
    return rows


def load_dataset(edge_path, feature_path, label_path, split_path=None,
                 num_classes: int | None = None) -> Dataset:
    """Read an edge list, headerless CSV features and labels, and JSON splits.

    The node count is the number of feature rows. ``splits.json`` holds
    ``{"train": [...], "val": [...], "test": [...]}`` node indices; when it is
    missing a stratified 60/20/20 split with seed 0 is generated.
    """
    feats = np.array(_read_matrix(feature_path, float), dtype=np.float64)
    if feats.ndim != 2:
        feats = feats.reshape(len(feats), -1)
    label_rows = _read_matrix(label_path, int)
    if any(len(r) != 1 for r in label_rows):
        raise ParseError(Path(label_path), 1, "labels file must have one column")
    labels = np.array([r[0] for r in label_rows], dtype=np.int64)
    n = feats.shape[0]
    if labels.size != n:
        raise InconsistentDimensions(f"{n} feature rows but {labels.size} labels")
    try:
        g = read_edge_list(edge_path, num_nodes=n)
    except IndexOutOfRange as exc:
        raise InconsistentDimensions(f"edge list refers to nodes beyond the {n} feature rows: {exc}")
    k = int(num_classes) if num_classes is not None else int(labels.max()) + 1 if n else 0
    empty = np.zeros(n, dtype=bool)
    ds = Dataset(g, feats, labels, empty, empty.copy(), empty.copy(), k)
    if split_path is None or not Path(split_path).exists():
        return split(ds, DEFAULT_FRACTIONS, 0)
    doc = json.loads(Path(split_path).read_text())
    masks = []
    for name in ("train", "val", "test"):
        m = np.zeros(n, dtype=bool)
        idx = np.asarray(doc.get(name, []), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise InconsistentDimensions(f"split {name!r} has indices outside [0, {n})")
        m[idx] = True
        masks.append(m)
    return replace(ds, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


def save_dataset(ds: Dataset, directory) -> dict:
    """Write ``edges.txt``, ``features.csv``, ``labels.csv`` and ``splits.json``."""
    if ds.graph_index is not None:
        raise ValueError("file export supports node-level datasets only")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "edges": d / "edges.txt",
        "features": d / "features.csv",
        "labels": d / "labels.csv",
        "splits": d / "splits.json",
    }
    write_edge_list(ds.graph, paths["edges"])
    with paths["features"].open("w") as fh:
        for row in ds.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with paths["labels"].open("w") as fh:
        for y in ds.labels:
            fh.write(f"{int(y)}\n")
    splits = {name: np.flatnonzero(ds.mask(name)).tolist() for name in ("train", "val", "test")}
    paths["splits"].write_text(json.dumps(splits))
    return {k: str(v) for k, v in paths.items()}
