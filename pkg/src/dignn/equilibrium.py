"""Fixed-point solvers for the implicit diffusion layer and constrained systems."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .errors import IsolatedNode, NonFiniteIterate, ShapeMismatch, Singular, TooLarge
from .laplacian import DENSE_CAP, LaplacianOperator, _as_columns, apply, to_dense

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100


@dataclass
class EquilibriumResult:
    z_star: np.ndarray
    iterations: int
    residual_history: list
    converged: bool
    z_star_norm: float

    def to_dict(self, include_matrix=True):
        d = {
            "iterations": self.iterations,
            "converged": self.converged,
            "z_star_norm": self.z_star_norm,
            "residual_history": [float(r) for r in self.residual_history],
        }
        if include_matrix:
            d["z_star"] = self.z_star.tolist()
        return d

    def to_json(self, include_matrix=True) -> str:
        return json.dumps(self.to_dict(include_matrix))


def _iterate(step, z0, tol, max_iter, callback=None):
    z = z0
    history = []
    converged = False
    for t in range(1, max_iter + 1):
        z_new = step(z)
        if not np.all(np.isfinite(z_new)):
            raise NonFiniteIterate(t)
        r = float(np.linalg.norm(z_new - z))
        history.append(r)
        z = z_new
        if callback is not None:
            callback(t, z)
        if r <= tol:
            converged = True
            break
    return EquilibriumResult(z, len(history), history, converged, float(np.linalg.norm(z)))


def _looks_ill_posed(op: LaplacianOperator, mu: float) -> bool:
    # Gershgorin: every eigenvalue lies below max_i (diag_i + sum_j |coeff_ij|)
    rows = np.bincount(op.graph.arc_sources, weights=np.abs(op.coeff), minlength=op.num_nodes)
    if op.num_nodes == 0 or mu > float(np.max(op.diag + rows)):
        return False
    from .spectral import power_iteration

    return mu <= power_iteration(op, tol=1e-8, max_iter=500).estimate


def solve_implicit_layer(
    op: LaplacianOperator,
    X_tilde,
    mu: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    *,
    check: bool = True,
    callback=None,
) -> EquilibriumResult:
    """Iterate Z <- X_tilde - (1/mu) Delta Z from Z = 0.

    Stops once the Frobenius change between iterates is at most ``tol``. An
    ill-posed ``mu`` only triggers a warning; divergence raises
    :class:`NonFiniteIterate`.
    """
    X = _as_columns(X_tilde, op.num_nodes, "X_tilde")
    if check and _looks_ill_posed(op, mu):
        warnings.warn(f"mu={mu} does not exceed lambda_max; iteration may diverge",
                      RuntimeWarning, stacklevel=2)
    inv = 1.0 / mu
    return _iterate(lambda z: X - inv * apply(op, z), np.zeros_like(X), tol, max_iter, callback)


def solve_direct(op: LaplacianOperator, X_tilde, mu: float, cap: int = DENSE_CAP):
    """Dense LU solve of (I + Delta/mu) Z = X_tilde."""
    if op.num_nodes > cap:
        raise TooLarge(f"{op.num_nodes} nodes exceeds dense cap {cap}")
    X = _as_columns(X_tilde, op.num_nodes, "X_tilde")
    M = np.eye(op.num_nodes) + to_dense(op, cap) / mu
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            return linalg.solve(M, X)
    except (np.linalg.LinAlgError, linalg.LinAlgWarning) as exc:
        raise Singular(f"(I + Delta/{mu}) is singular: {exc}") from None


@dataclass(frozen=True, eq=False)
class MarkovMatrix:
    """Row-stochastic diffusion P_ij = varphi^2 phi / Dhat_i stored per arc."""

    graph: object
    values: np.ndarray
    dhat: np.ndarray

    def matrix(self) -> sparse.csr_matrix:
        g = self.graph
        n = g.num_nodes
        return sparse.csr_matrix((self.values, g.neighbor_ids, g.row_offsets), shape=(n, n))

    def apply(self, F):
        return self.matrix() @ F


def build_markov(op: LaplacianOperator) -> MarkovMatrix:
    g = op.graph
    arc_w = op.arc_weight
    dhat = np.bincount(g.arc_sources, weights=arc_w, minlength=g.num_nodes)
    bad = np.flatnonzero(dhat <= 0)
    if bad.size:
        raise IsolatedNode(f"nodes with zero total edge weight: {bad[:10].tolist()}")
    return MarkovMatrix(g, arc_w / dhat[g.arc_sources], dhat)


def stationary_distribution(markov: MarkovMatrix) -> np.ndarray:
    """pi_i = Dhat_i / sum_j Dhat_j, the left fixed vector of P."""
    return markov.dhat / markov.dhat.sum()


@dataclass
class ConstraintSet:
    """Constrained nodes with their targets, padded to all nodes."""

    num_nodes: int
    constrained_nodes: np.ndarray
    targets: np.ndarray
    indicator: np.ndarray = field(init=False)
    padded_targets: np.ndarray = field(init=False)

    def __post_init__(self):
        nodes = np.asarray(self.constrained_nodes, dtype=np.int64).ravel()
        targets = np.asarray(self.targets, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[:, None]
        if targets.shape[0] != nodes.size:
            raise ShapeMismatch(f"{nodes.size} constrained nodes but {targets.shape[0]} targets")
        if nodes.size and (nodes.min() < 0 or nodes.max() >= self.num_nodes):
            raise ShapeMismatch("constrained node index out of range")
        if np.unique(nodes).size != nodes.size:
            raise ValueError("duplicate constrained nodes")
        self.constrained_nodes = nodes
        self.targets = targets
        self.indicator = np.zeros(self.num_nodes)
        self.indicator[nodes] = 1.0
        self.padded_targets = np.zeros((self.num_nodes, targets.shape[1]))
        self.padded_targets[nodes] = targets

    @classmethod
    def all_nodes(cls, targets):
        targets = np.asarray(targets, dtype=np.float64)
        return cls(targets.shape[0], np.arange(targets.shape[0]), targets)

    @classmethod
    def empty(cls, num_nodes, num_cols):
        return cls(num_nodes, np.zeros(0, dtype=np.int64), np.zeros((0, num_cols)))


@dataclass(frozen=True, eq=False)
class ConstrainedSystem:
    """f = Y' + C f with C_i = P_i for free nodes and -(1/mu) Delta_i otherwise."""

    C: sparse.csr_matrix
    padded_targets: np.ndarray
    mu: float
    indicator: np.ndarray

    def dense(self) -> np.ndarray:
        return np.asarray(self.C.todense())


def build_constrained_system(op: LaplacianOperator, markov: MarkovMatrix | None,
                             cs: ConstraintSet, mu: float) -> ConstrainedSystem:
    if cs.num_nodes != op.num_nodes:
        raise ShapeMismatch(f"constraints on {cs.num_nodes} nodes, operator has {op.num_nodes}")
    delta = cs.indicator
    free = 1.0 - delta
    lap_rows = sparse.diags(delta / mu) @ op.matrix()
    if free.any():
        if markov is None:
            markov = build_markov(op)
        C = sparse.diags(free) @ markov.matrix() - lap_rows
    else:
        C = -lap_rows
    C = sparse.csr_matrix(C)
    C.eliminate_zeros()
    C.sort_indices()
    return ConstrainedSystem(C, cs.padded_targets.copy(), float(mu), delta.copy())


def estimate_gamma_max(system: ConstrainedSystem, iters: int = 50, seed: int = 0) -> float:
    """Largest singular value of C from ``iters`` power steps on C^T C."""
    C = system.C
    n = C.shape[0]
    if n == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        y = C.T @ (C @ v)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        v = y / ny
        s = math.sqrt(ny)
    return s


def solve_constrained(system: ConstrainedSystem, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, f0=None, *, check: bool = True,
                      callback=None) -> EquilibriumResult:
    """Iterate f <- Y' + C f. Non-convergence is reported, not raised."""
    Y = system.padded_targets
    if f0 is None:
        f = np.zeros_like(Y)
    else:
        f = _as_columns(f0, Y.shape[0], "f0").copy()
        if f.shape != Y.shape:
            raise ShapeMismatch(f"f0 {f.shape} vs targets {Y.shape}")
    if check:
        gamma = estimate_gamma_max(system)
        if gamma >= 1.0:
            warnings.warn(f"estimated largest singular value of C is {gamma:.4g} >= 1; "
                          "the equilibrium may be non-unique", RuntimeWarning, stacklevel=2)
    C = system.C
    return _iterate(lambda z: Y + C @ z, f, tol, max_iter, callback)


def solve_constrained_direct(system: ConstrainedSystem, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense solve of (I - C) f = Y'."""
    n = system.C.shape[0]
    if n > cap:
        raise TooLarge(f"{n} nodes exceeds dense cap {cap}")
    try:
        return linalg.solve(np.eye(n) - system.dense(), system.padded_targets)
    except np.linalg.LinAlgError as exc:
        raise Singular(str(exc)) from None
