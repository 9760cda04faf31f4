"""Vertex/edge inner products, graph gradient and divergence, and Laplacians.

Every Laplacian here is stored as per-arc coefficients ``coeff[a]`` for arc
``a = (i, j)`` plus a per-node diagonal, so that

    (Delta f)(i) = diag[i] * f(i) - sum_j coeff[i -> j] * f(j).

For the kinds built from a vertex measure chi and an edge kernel (phi, varphi)
the coefficient is ``varphi^2 * phi / chi(i)`` and the diagonal is the row sum,
so constants are in the kernel. The normalized kind uses the scaled gradient
``varphi * (f(j)/sqrt(D_j) - f(i)/sqrt(D_i))`` and has diagonal 1.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import (
    NonFiniteFeature,
    ShapeMismatch,
    TooLarge,
    ZeroDegree,
    ZeroDegreeNormalized,
)
from .graph import Graph, degrees

DEFAULT_EPSILON = 1e-6
DENSE_CAP = 2000


class Kind(str, enum.Enum):
    UNNORMALIZED = "unnormalized"
    RANDOM_WALK = "random_walk"
    NORMALIZED = "normalized"
    PARAMETERIZED = "parameterized"


CANONICAL_KINDS = (Kind.UNNORMALIZED, Kind.RANDOM_WALK, Kind.NORMALIZED)


def _as_columns(f, n, name="f"):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2 or f.shape[0] != n:
        raise ShapeMismatch(f"{name} has shape {f.shape}, expected ({n}, c)")
    return f


def _shape_like(out, like):
    return out[:, 0] if np.ndim(like) == 1 else out


@dataclass(frozen=True)
class EdgeKernel:
    """Per-arc edge measure ``phi`` and gradient diffusivity ``varphi``."""

    phi: np.ndarray
    varphi: np.ndarray


@dataclass
class GeometryParams:
    """Learnable geometry of the graph neural Laplacian.

    ``theta_chi`` is (h_chi, d), ``theta_phi`` is (h_phi, h_chi) and
    ``theta_varphi`` is (h_varphi, d) for d-dimensional node embeddings.
    """

    theta_chi: np.ndarray
    theta_phi: np.ndarray
    theta_varphi: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    norm_bound_B: float = 1.0
    embed_bound_beta: float = 1.0

    def __post_init__(self):
        self.theta_chi = np.atleast_2d(np.asarray(self.theta_chi, dtype=np.float64))
        self.theta_phi = np.atleast_2d(np.asarray(self.theta_phi, dtype=np.float64))
        self.theta_varphi = np.atleast_2d(np.asarray(self.theta_varphi, dtype=np.float64))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (self.norm_bound_B > 0 and self.embed_bound_beta > 0):
            raise ValueError("bounds must be positive")
        if self.theta_phi.shape[1] != self.theta_chi.shape[0]:
            raise ShapeMismatch(
                f"theta_phi {self.theta_phi.shape} incompatible with theta_chi {self.theta_chi.shape}"
            )
        if self.theta_varphi.shape[1] != self.theta_chi.shape[1]:
            raise ShapeMismatch("theta_varphi and theta_chi disagree on feature dimension")

    @property
    def dim(self) -> int:
        return self.theta_chi.shape[1]

    @classmethod
    def init(cls, dim, rng, hidden_chi=None, hidden_phi=None, hidden_varphi=None, **kw):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
        hc = hidden_chi or dim
        hp = hidden_phi or hc
        hv = hidden_varphi or dim

        def u(rows, cols):
            b = 1.0 / np.sqrt(cols)
            return rng.uniform(-b, b, size=(rows, cols))

        return cls(u(hc, dim), u(hp, hc), u(hv, dim), **kw)


@dataclass(frozen=True, eq=False)
class LaplacianOperator:
    kind: Kind
    graph: Graph
    coeff: np.ndarray
    diag: np.ndarray
    chi: np.ndarray
    kernel: EdgeKernel
    dhat: np.ndarray
    degree: np.ndarray
    _csr: sparse.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        g = self.graph
        n = g.num_nodes
        c = sparse.csr_matrix((self.coeff, g.neighbor_ids, g.row_offsets), shape=(n, n))
        object.__setattr__(self, "_csr", c)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def arc_weight(self) -> np.ndarray:
        """varphi^2 * phi per arc, the weight in the Dirichlet energy."""
        return self.kernel.varphi ** 2 * self.kernel.phi

    @property
    def zeroed_arcs(self) -> int:
        """Arcs whose coefficient vanished (orthogonal embeddings make phi = 0)."""
        return int(np.count_nonzero(self.coeff[: self.graph.num_arcs] == 0.0))

    def matrix(self) -> sparse.csr_matrix:
        return (sparse.diags(self.diag) - self._csr).tocsr()

    def apply(self, F):
        return apply(self, F)

    def apply_transpose(self, F):
        return apply_transpose(self, F)


def vertex_inner_product(f, g, chi) -> float:
    """sum_i <f(i), g(i)> chi(i)."""
    chi = np.asarray(chi, dtype=np.float64)
    n = chi.shape[0]
    f = _as_columns(f, n)
    g = _as_columns(g, n, "g")
    if f.shape != g.shape:
        raise ShapeMismatch(f"{f.shape} vs {g.shape}")
    return float(np.dot(np.einsum("ij,ij->i", f, g), chi))


def edge_inner_product(F, G, phi) -> float:
    """1/2 sum over arcs of <F(a), G(a)> phi(a)."""
    phi = np.asarray(phi, dtype=np.float64)
    m = phi.shape[0]
    F = _as_columns(F, m, "F")
    G = _as_columns(G, m, "G")
    if F.shape != G.shape:
        raise ShapeMismatch(f"{F.shape} vs {G.shape}")
    return 0.5 * float(np.dot(np.einsum("ij,ij->i", F, G), phi))


def _scaled(f, deg):
    if deg is None:
        return f
    deg = np.asarray(deg, dtype=np.float64)
    if np.any(deg <= 0):
        raise ZeroDegreeNormalized("normalized gradient needs strictly positive degrees")
    return f / np.sqrt(deg)[:, None]


def graph_gradient(f, graph: Graph, varphi, deg=None):
    """Arc function varphi(a) (f(j) - f(i)).

    Passing ``deg`` selects the normalized gradient, which differences
    ``f / sqrt(deg)`` instead of ``f``.
    """
    fc = _scaled(_as_columns(f, graph.num_nodes), deg)
    out = np.asarray(varphi)[:, None] * (fc[graph.neighbor_ids] - fc[graph.arc_sources])
    return _shape_like(out, f)


def graph_divergence(gfun, graph: Graph, chi, phi, varphi, deg=None):
    """Adjoint of :func:`graph_gradient` under the vertex and edge inner products.

    (div g)(i) = 1/(2 chi(i)) sum_j varphi phi (g([i,j]) - g([j,i])), with an
    extra 1/sqrt(D_i) in normalized mode. Nodes with chi(i) = 0 (isolated
    nodes) have no arcs and get zero.
    """
    gc = _as_columns(gfun, graph.num_arcs, "gfun")
    w = np.asarray(varphi) * np.asarray(phi)
    flux = w[:, None] * (gc - gc[graph.reverse_arcs])
    out = np.zeros((graph.num_nodes, gc.shape[1]))
    np.add.at(out, graph.arc_sources, flux)
    chi = np.asarray(chi, dtype=np.float64)
    scale = np.zeros_like(chi)
    pos = chi > 0
    scale[pos] = 0.5 / chi[pos]
    if deg is not None:
        deg = np.asarray(deg, dtype=np.float64)
        if np.any(deg <= 0):
            raise ZeroDegreeNormalized("normalized divergence needs strictly positive degrees")
        scale = scale / np.sqrt(deg)
    return _shape_like(out * scale[:, None], gfun)


def build_canonical(graph: Graph, kind) -> LaplacianOperator:
    """Unnormalized, random-walk or normalized Laplacian of ``graph``.

    The kernel is fixed as phi = 1, varphi = sqrt(A) so that varphi^2 phi = A.
    The normalized kind uses chi = 1, the measure under which its operator is
    self-adjoint and matches its Dirichlet energy.
    """
    kind = Kind(kind)
    if kind not in CANONICAL_KINDS:
        raise ValueError(f"{kind} is not a canonical kind")
    n = graph.num_nodes
    a = graph.edge_weights
    deg = degrees(graph)
    src, dst = graph.arc_sources, graph.neighbor_ids
    kernel = EdgeKernel(phi=np.ones_like(a), varphi=np.sqrt(a))
    if kind is Kind.UNNORMALIZED:
        chi = np.ones(n)
        coeff = a.copy()
        diag = deg.copy()
    else:
        if np.any(deg <= 0):
            err = ZeroDegreeNormalized if kind is Kind.NORMALIZED else ZeroDegree
            raise err(f"{kind.value} Laplacian needs every degree > 0")
        if kind is Kind.RANDOM_WALK:
            chi = deg.copy()
            coeff = a / deg[src]
            diag = np.ones(n)
        else:
            chi = np.ones(n)
            coeff = a / np.sqrt(deg[src] * deg[dst])
            diag = np.ones(n)
    return LaplacianOperator(kind, graph, coeff, diag, chi, kernel, deg.copy(), deg)


@dataclass
class GeometryTerms:
    """Intermediate values of the neural Laplacian, kept for differentiation."""

    x: np.ndarray
    u: np.ndarray          # theta_chi x_i
    u_norm: np.ndarray     # |theta_chi x_i|
    t: np.ndarray          # tanh(|theta_chi x_i|)
    floored: np.ndarray    # t < epsilon, chi clamped to epsilon * D_i
    chi_unit: np.ndarray   # max(t, epsilon)
    e: np.ndarray          # theta_phi theta_chi x_i
    s: np.ndarray          # e_i . e_j per arc
    phi: np.ndarray        # tanh(|s|)
    w: np.ndarray          # theta_varphi (x_i - x_j) per arc
    r: np.ndarray          # |w|
    q: np.ndarray          # tanh(1 / (r + epsilon))
    base: np.ndarray       # A_ij / D_i per arc
    coeff: np.ndarray


def _geometry_terms(graph: Graph, X, p: GeometryParams) -> GeometryTerms:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != graph.num_nodes:
        raise ShapeMismatch(f"features {X.shape} for {graph.num_nodes} nodes")
    if X.shape[1] != p.dim:
        raise ShapeMismatch(f"features have dimension {X.shape[1]}, geometry expects {p.dim}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("node features must be finite")
    src, dst = graph.arc_sources, graph.neighbor_ids
    deg = degrees(graph)
    u = X @ p.theta_chi.T
    u_norm = np.linalg.norm(u, axis=1)
    t = np.tanh(u_norm)
    floored = t < p.epsilon
    chi_unit = np.where(floored, p.epsilon, t)
    e = u @ p.theta_phi.T
    s = np.einsum("ij,ij->i", e[src], e[dst])
    phi = np.tanh(np.abs(s))
    w = (X[src] - X[dst]) @ p.theta_varphi.T
    r = np.linalg.norm(w, axis=1)
    q = np.tanh(1.0 / (r + p.epsilon))
    base = graph.edge_weights / deg[src] if graph.num_arcs else np.zeros(0)
    coeff = base * q * phi / chi_unit[src]
    return GeometryTerms(X, u, u_norm, t, floored, chi_unit, e, s, phi, w, r, q, base, coeff)


def build_parameterized(graph: Graph, X, p: GeometryParams, return_terms=False):
    """Graph neural Laplacian with chi, phi, varphi computed from features ``X``.

    chi(i) = D_i tanh(|theta_chi x_i|), floored at epsilon * D_i;
    phi = tanh(|(theta_phi theta_chi x_i) . (theta_phi theta_chi x_j)|);
    varphi = sqrt(A_ij tanh(1 / (|theta_varphi (x_i - x_j)| + epsilon))).
    """
    terms = _geometry_terms(graph, X, p)
    deg = degrees(graph)
    src = graph.arc_sources
    chi = deg * terms.chi_unit
    varphi = np.sqrt(graph.edge_weights * terms.q)
    kernel = EdgeKernel(phi=terms.phi, varphi=varphi)
    arc_w = varphi ** 2 * terms.phi
    dhat = np.bincount(src, weights=arc_w, minlength=graph.num_nodes)
    diag = np.bincount(src, weights=terms.coeff, minlength=graph.num_nodes)
    op = LaplacianOperator(Kind.PARAMETERIZED, graph, terms.coeff, diag, chi, kernel, dhat, deg)
    return (op, terms) if return_terms else op


def geometry_vjp(graph: Graph, terms: GeometryTerms, p: GeometryParams, g_coeff):
    """Pull a gradient on the per-arc coefficients back to features and thetas.

    Returns ``(g_X, g_theta_chi, g_theta_phi, g_theta_varphi)``. The clamped
    region of chi contributes zero derivative; |.| and the norms use the
    zero subgradient at 0.
    """
    src, dst = graph.arc_sources, graph.neighbor_ids
    n = graph.num_nodes
    g_coeff = np.asarray(g_coeff, dtype=np.float64)
    cu = terms.chi_unit[src]
    g_q = g_coeff * terms.base * terms.phi / cu
    g_phi = g_coeff * terms.base * terms.q / cu
    g_chi_arc = -g_coeff * terms.coeff / cu
    g_chi_unit = np.bincount(src, weights=g_chi_arc, minlength=n)

    # phi = tanh(|s|)
    g_s = g_phi * (1.0 - terms.phi ** 2) * np.sign(terms.s)
    g_e = np.zeros_like(terms.e)
    np.add.at(g_e, src, g_s[:, None] * terms.e[dst])
    np.add.at(g_e, dst, g_s[:, None] * terms.e[src])
    g_theta_phi = g_e.T @ terms.u
    g_u = g_e @ p.theta_phi

    # chi_unit = max(tanh(|u|), eps)
    g_t = np.where(terms.floored, 0.0, g_chi_unit)
    g_a = g_t * (1.0 - terms.t ** 2)
    safe = terms.u_norm > 0
    g_u[safe] += (g_a[safe] / terms.u_norm[safe])[:, None] * terms.u[safe]
    g_theta_chi = g_u.T @ terms.x
    g_x = g_u @ p.theta_chi

    # q = tanh(1 / (r + eps)), r = |w|
    re = terms.r + p.epsilon
    g_r = g_q * (1.0 - terms.q ** 2) * (-1.0 / re ** 2)
    g_w = np.zeros_like(terms.w)
    ok = terms.r > 0
    g_w[ok] = (g_r[ok] / terms.r[ok])[:, None] * terms.w[ok]
    diff = terms.x[src] - terms.x[dst]
    g_theta_varphi = g_w.T @ diff
    g_diff = g_w @ p.theta_varphi
    np.add.at(g_x, src, g_diff)
    np.add.at(g_x, dst, -g_diff)
    return g_x, g_theta_chi, g_theta_phi, g_theta_varphi


def apply(op: LaplacianOperator, F):
    Fc = _as_columns(F, op.num_nodes, "F")
    out = op.diag[:, None] * Fc - op._csr @ Fc
    return _shape_like(out, F)


def apply_transpose(op: LaplacianOperator, F):
    Fc = _as_columns(F, op.num_nodes, "F")
    if op.kind in (Kind.UNNORMALIZED, Kind.NORMALIZED):
        out = op.diag[:, None] * Fc - op._csr @ Fc
    else:
        out = op.diag[:, None] * Fc - op._csr.T @ Fc
    return _shape_like(out, F)


def to_dense(op: LaplacianOperator, cap: int = DENSE_CAP) -> np.ndarray:
    n = op.num_nodes
    if n > cap:
        raise TooLarge(f"{n} nodes exceeds dense cap {cap}")
    return np.asarray(op.matrix().todense())


def arc_coeff_gradient(op: LaplacianOperator, V, Z):
    """d<V, Delta Z>/d coeff[a] for arc a = (i, j), equal to <V_i, Z_i - Z_j>.

    Valid for the kinds whose diagonal is the coefficient row sum.
    """
    g = op.graph
    V = _as_columns(V, g.num_nodes, "V")
    Z = _as_columns(Z, g.num_nodes, "Z")
    return np.einsum("ij,ij->i", V[g.arc_sources], Z[g.arc_sources] - Z[g.neighbor_ids])


def dirichlet_energy(op: LaplacianOperator, f) -> float:
    """1/2 sum over arcs of varphi^2 phi |f(j) - f(i)|^2.

    For the normalized kind the differences are taken on f / sqrt(D).
    """
    g = op.graph
    fc = _as_columns(f, g.num_nodes)
    if op.kind is Kind.NORMALIZED:
        fc = _scaled(fc, op.degree)
    d = fc[g.neighbor_ids] - fc[g.arc_sources]
    return 0.5 * float(np.dot(op.arc_weight, np.einsum("ij,ij->i", d, d)))


def dirichlet_energy_gradient(op: LaplacianOperator, f):
    """Per-node gradient of the Dirichlet energy, 2 chi(i) (Delta f)(i)."""
    fc = _as_columns(f, op.num_nodes)
    out = 2.0 * op.chi[:, None] * apply(op, fc)
    return _shape_like(out, f)


def export_coefficients(op: LaplacianOperator, path) -> None:
    """Write one ``i,j,coeff`` row per stored arc."""
    g = op.graph
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "coeff"])
        for i, j, c in zip(g.arc_sources.tolist(), g.neighbor_ids.tolist(), op.coeff.tolist()):
            w.writerow([i, j, repr(c)])
