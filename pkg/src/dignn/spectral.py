"""Dominant eigenvalue estimation and well-posedness certificates."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .graph import is_connected
from .laplacian import GeometryParams, Kind, LaplacianOperator, apply

RAYLEIGH_TOL = 1e-10
POWER_MAX_ITER = 10_000


@dataclass(frozen=True)
class PowerResult:
    estimate: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class WellPosednessReport:
    lambda_max_estimate: float
    analytic_bound: float
    mu: float
    well_posed: bool
    margin: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def power_iteration(op: LaplacianOperator, tol=RAYLEIGH_TOL, max_iter=POWER_MAX_ITER, seed=0):
    """Power iteration v <- Delta v with a chi-weighted Rayleigh quotient.

    Delta is self-adjoint and PSD in the chi inner product, so the quotient
    increases towards lambda_max and no shift is needed. Stops when the
    quotient changes by less than ``tol`` relative.
    """
    n = op.num_nodes
    if n == 0:
        return PowerResult(0.0, True, 0)
    w = np.where(op.chi > 0, op.chi, 1.0)
    v = np.random.default_rng(seed).standard_normal(n)
    v /= math.sqrt(np.dot(w * v, v))
    rq = 0.0
    for it in range(1, max_iter + 1):
        y = apply(op, v)
        new = float(np.dot(w * v, y))
        norm = math.sqrt(np.dot(w * y, y))
        if norm == 0.0:
            return PowerResult(0.0, True, it)
        v = y / norm
        if it > 1 and abs(new - rq) <= tol * max(abs(new), 1e-300):
            return PowerResult(new, True, it)
        rq = new
    return PowerResult(rq, False, max_iter)


def lambda_max(op: LaplacianOperator, tol=RAYLEIGH_TOL, max_iter=POWER_MAX_ITER, seed=0) -> float:
    """Estimate of the largest eigenvalue of ``op``; warns if not converged."""
    if op.num_nodes > 1 and not is_connected(op.graph):
        warnings.warn("lambda_max on a disconnected graph", RuntimeWarning, stacklevel=2)
    res = power_iteration(op, tol, max_iter, seed)
    if not res.converged:
        warnings.warn(
            f"power iteration did not converge in {max_iter} steps; "
            f"returning best estimate {res.estimate:.6g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return res.estimate


def spectral_bound(p: GeometryParams) -> float:
    """Upper bound 2 B^3 beta cosh(B beta) on the neural Laplacian spectrum."""
    B, beta = p.norm_bound_B, p.embed_bound_beta
    return spectral_bound_value(B, beta)


def spectral_bound_value(B: float, beta: float) -> float:
    return 2.0 * B ** 3 * beta * math.cosh(B * beta)


def certify(op: LaplacianOperator, mu: float, p: GeometryParams | None = None, seed=0):
    est = lambda_max(op, seed=seed)
    if op.kind is Kind.RANDOM_WALK or op.kind is Kind.NORMALIZED:
        bound = 2.0
    elif op.kind is Kind.PARAMETERIZED and p is not None:
        bound = spectral_bound(p)
    else:
        bound = est
    return WellPosednessReport(
        lambda_max_estimate=est,
        analytic_bound=bound,
        mu=float(mu),
        well_posed=bool(mu > est),
        margin=float(mu - est),
    )


def spectral_norm(M, iters=200, seed=0) -> float:
    """Largest singular value of ``M`` by power iteration on M^T M."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if not M.any():
        return 0.0
    v = np.random.default_rng(seed).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        y = M.T @ (M @ v)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        v = y / ny
        s_new = math.sqrt(ny)
        if abs(s_new - s) <= 1e-14 * s_new:
            return s_new
        s = s_new
    return s
