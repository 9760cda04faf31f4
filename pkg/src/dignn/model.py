"""DIGNN: preprocessing layer, implicit diffusion layer and output layer.

The forward pass solves Z = X_tilde - (1/mu) Delta Z by fixed-point
iteration. The backward pass differentiates through the equilibrium with an
adjoint solve (I + Delta^T/mu) V = dL/dZ instead of unrolling the iteration.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .equilibrium import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_implicit_layer
from .errors import AdjointNoConvergence, EmptyMask, EmptySplit, NonFiniteGradient, ShapeMismatch
from .graph import Graph
from .laplacian import (
    GeometryParams,
    Kind,
    apply,
    apply_transpose,
    arc_coeff_gradient,
    build_canonical,
    build_parameterized,
    geometry_vjp,
)
from .spectral import spectral_bound_value, spectral_norm

CHECKPOINT_FORMAT = "dignn-checkpoint"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("identity", "relu", "tanh")


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name, pre, out, g):
    if name == "relu":
        return g * (pre > 0)
    if name == "tanh":
        return g * (1.0 - out ** 2)
    return g


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in, out)
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.size != self.weights.shape[1]:
            raise ShapeMismatch("bias length must match layer width")

    @classmethod
    def init(cls, fan_in, fan_out, rng, activation="identity"):
        b = 1.0 / math.sqrt(fan_in)
        return cls(rng.uniform(-b, b, (fan_in, fan_out)), rng.uniform(-b, b, fan_out), activation)

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), np.zeros(dim))


@dataclass
class BatchNormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon_bn: float = 1e-5
    momentum: float = 0.1
    training_mode: bool = True

    @classmethod
    def init(cls, dim):
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim))


@dataclass
class DIGNNModel:
    preprocess: list
    output: list
    mu: float = 2.5
    laplacian_kind: Kind = Kind.RANDOM_WALK
    geometry: GeometryParams | None = None
    norm: BatchNormState | None = None
    preprocess_mode: str = "mlp"
    readout: str = "none"
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    dropout: float = 0.0

    def __post_init__(self):
        self.laplacian_kind = Kind(self.laplacian_kind)
        if (self.geometry is not None) != (self.laplacian_kind is Kind.PARAMETERIZED):
            raise ValueError("geometry parameters are required exactly for the parameterized kind")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.preprocess_mode not in ("mlp", "adjacency_times_features"):
            raise ValueError(f"unknown preprocess_mode {self.preprocess_mode!r}")
        if self.readout not in ("none", "mean"):
            raise ValueError(f"unknown readout {self.readout!r}")

    @classmethod
    def create(cls, in_dim, hidden, num_classes, *, kind=Kind.RANDOM_WALK, mu=2.5, seed=0,
               preprocess_mode="mlp", activation="relu", batch_norm=True, readout="none",
               tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, dropout=0.0, epsilon=1e-6,
               preprocess_layers=1):
        """Randomly initialized model; every matrix is U(+-1/sqrt(fan_in)).

        ``preprocess_layers`` sets the depth of the input perceptron (mlp mode only).
        """
        rng = np.random.default_rng(seed)
        kind = Kind(kind)
        if preprocess_mode == "mlp":
            if preprocess_layers < 1:
                raise ValueError("preprocess_layers must be >= 1")
            pre = [DenseLayer.init(in_dim if k == 0 else hidden, hidden, rng, activation)
                   for k in range(preprocess_layers)]
            width = hidden
        else:
            pre = []
            width = in_dim
        geometry = GeometryParams.init(width, rng, epsilon=epsilon) if kind is Kind.PARAMETERIZED else None
        out = [DenseLayer.init(width, num_classes, rng)]
        norm = BatchNormState.init(width) if batch_norm else None
        return cls(pre, out, mu, kind, geometry, norm, preprocess_mode, readout, tol, max_iter, dropout)

    def parameters(self) -> dict:
        """Name -> array view of every trainable array; updates are in place."""
        p = {}
        for k, layer in enumerate(self.preprocess):
            p[f"preprocess.{k}.weights"] = layer.weights
            p[f"preprocess.{k}.bias"] = layer.bias
        if self.norm is not None:
            p["norm.scale"] = self.norm.scale
            p["norm.shift"] = self.norm.shift
        if self.geometry is not None:
            p["theta_chi"] = self.geometry.theta_chi
            p["theta_phi"] = self.geometry.theta_phi
            p["theta_varphi"] = self.geometry.theta_varphi
        for k, layer in enumerate(self.output):
            p[f"output.{k}.weights"] = layer.weights
            p[f"output.{k}.bias"] = layer.bias
        return p

    def copy(self) -> "DIGNNModel":
        return copy.deepcopy(self)


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class ForwardCache:
    x: np.ndarray
    input_mask: np.ndarray | None
    layer_inputs: list
    layer_pre: list
    layer_out: list
    x_tilde: np.ndarray          # preprocessing output
    x_norm: np.ndarray           # batch-normalized input of the implicit layer
    bn_stats: tuple | None       # (mean, var, xhat, used batch statistics)
    op: object
    terms: object
    z_star: np.ndarray
    z_mask: np.ndarray | None
    readout_in: np.ndarray
    out_inputs: list
    out_pre: list
    out_out: list
    logits: np.ndarray
    solve: object
    graph: Graph
    graph_index: np.ndarray | None
    iterates: list | None = None


def _dropout_mask(rng, shape, p):
    if rng is None or p <= 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def _segment_mean(z, index, count):
    sums = np.zeros((count, z.shape[1]))
    np.add.at(sums, index, z)
    sizes = np.bincount(index, minlength=count).astype(np.float64)
    return sums / np.maximum(sizes, 1.0)[:, None], sizes


def forward(model: DIGNNModel, g: Graph, X, *, training=False, rng=None, graph_index=None,
            max_iter=None, tol=None, record_iterates=False):
    """Evaluate the model and return ``(logits, cache)``.

    ``training`` selects batch statistics in batch norm; dropout is drawn from
    ``rng`` only when training and ``rng`` is given. Running statistics are
    not touched here (see :func:`update_running_stats`).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != g.num_nodes:
        raise ShapeMismatch(f"features {X.shape} for a graph with {g.num_nodes} nodes")
    drop_rng = rng if training else None
    in_mask = _dropout_mask(drop_rng, X.shape, model.dropout)
    h = X * in_mask if in_mask is not None else X

    layer_inputs, layer_pre, layer_out = [], [], []
    if model.preprocess_mode == "adjacency_times_features":
        h = g.adjacency() @ h
    else:
        for layer in model.preprocess:
            layer_inputs.append(h)
            pre = h @ layer.weights + layer.bias
            h = _act(layer.activation, pre)
            layer_pre.append(pre)
            layer_out.append(h)
    x_tilde = h

    bn_stats = None
    if model.norm is not None:
        nm = model.norm
        if training:
            mean = x_tilde.mean(axis=0)
            var = x_tilde.var(axis=0)
        else:
            mean, var = nm.running_mean, nm.running_var
        xhat = (x_tilde - mean) / np.sqrt(var + nm.epsilon_bn)
        x_norm = xhat * nm.scale + nm.shift
        bn_stats = (mean, var, xhat, training)
    else:
        x_norm = x_tilde

    terms = None
    if model.laplacian_kind is Kind.PARAMETERIZED:
        op, terms = build_parameterized(g, x_norm, model.geometry, return_terms=True)
    else:
        op = build_canonical(g, model.laplacian_kind)

    iters = [np.zeros_like(x_norm)] if record_iterates else None
    cb = (lambda t, z: iters.append(z)) if record_iterates else None
    res = solve_implicit_layer(
        op, x_norm, model.mu,
        model.tol if tol is None else tol,
        model.max_iter if max_iter is None else max_iter,
        check=False, callback=cb,
    )
    z = res.z_star
    z_mask = _dropout_mask(drop_rng, z.shape, model.dropout)
    h = z * z_mask if z_mask is not None else z

    if model.readout == "mean":
        if graph_index is None:
            graph_index = np.zeros(g.num_nodes, dtype=np.int64)
        h, _ = _segment_mean(h, graph_index, int(graph_index.max()) + 1 if graph_index.size else 0)
    readout_in = h

    out_inputs, out_pre, out_out = [], [], []
    for layer in model.output:
        out_inputs.append(h)
        pre = h @ layer.weights + layer.bias
        h = _act(layer.activation, pre)
        out_pre.append(pre)
        out_out.append(h)
    cache = ForwardCache(X, in_mask, layer_inputs, layer_pre, layer_out, x_tilde, x_norm,
                         bn_stats, op, terms, z, z_mask, readout_in, out_inputs, out_pre,
                         out_out, h, res, g, graph_index, iters)
    return h, cache


def update_running_stats(model: DIGNNModel, cache: ForwardCache) -> None:
    if model.norm is None or cache.bn_stats is None or not cache.bn_stats[3]:
        return
    nm = model.norm
    mean, var = cache.bn_stats[0], cache.bn_stats[1]
    n = cache.x_tilde.shape[0]
    unbiased = var * n / max(n - 1, 1)
    nm.running_mean[:] = (1 - nm.momentum) * nm.running_mean + nm.momentum * mean
    nm.running_var[:] = (1 - nm.momentum) * nm.running_var + nm.momentum * unbiased


def _check_mask(mask, n):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ShapeMismatch(f"mask has shape {mask.shape}, expected ({n},)")
        idx = np.flatnonzero(mask)
    else:
        idx = mask.astype(np.int64).ravel()
    if idx.size == 0:
        raise EmptyMask("loss mask selects no rows")
    return idx


def loss_cross_entropy(logits, labels, mask=None) -> float:
    """Mean softmax cross-entropy over the rows selected by ``mask``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.arange(logits.shape[0]) if mask is None else _check_mask(mask, logits.shape[0])
    z = logits[idx]
    y = labels[idx]
    if np.any((y < 0) | (y >= z.shape[1])):
        raise ValueError("label outside [0, num_classes)")
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(idx.size), y]))


def cross_entropy_grad(logits, labels, mask=None):
    """(softmax - onehot) / |mask| on masked rows, zero elsewhere."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.arange(logits.shape[0]) if mask is None else _check_mask(mask, logits.shape[0])
    g = np.zeros_like(logits)
    p = softmax(logits[idx], axis=1)
    p[np.arange(idx.size), labels[idx]] -= 1.0
    g[idx] = p / idx.size
    return g


@dataclass
class Gradients:
    params: dict
    x_norm: np.ndarray            # dL/d(implicit layer input), direct path only
    adjoint_iterations: int = 0
    adjoint_converged: bool = True

    def groups(self) -> dict:
        out = {}
        for name, g in self.params.items():
            out.setdefault(param_group(name), []).append(name)
        return out


def _output_backward(model, cache, g_logits, grads):
    g = g_logits
    for k in reversed(range(len(model.output))):
        layer = model.output[k]
        g = _act_grad(layer.activation, cache.out_pre[k], cache.out_out[k], g)
        grads[f"output.{k}.weights"] = cache.out_inputs[k].T @ g
        grads[f"output.{k}.bias"] = g.sum(axis=0)
        g = g @ layer.weights.T
    if model.readout == "mean":
        idx = cache.graph_index
        if idx is None:
            idx = np.zeros(cache.z_star.shape[0], dtype=np.int64)
        sizes = np.bincount(idx, minlength=g.shape[0]).astype(np.float64)
        g = g[idx] / sizes[idx][:, None]
    if cache.z_mask is not None:
        g = g * cache.z_mask
    return g


def _input_backward(model, cache, g_xnorm, g_coeff, grads):
    """Propagate from the implicit layer input and arc coefficients to parameters."""
    if model.laplacian_kind is Kind.PARAMETERIZED:
        g_x, g_tc, g_tp, g_tv = geometry_vjp(cache.graph, cache.terms, model.geometry, g_coeff)
        grads["theta_chi"] = g_tc
        grads["theta_phi"] = g_tp
        grads["theta_varphi"] = g_tv
        g_xnorm = g_xnorm + g_x

    g = g_xnorm
    if model.norm is not None:
        nm = model.norm
        mean, var, xhat, batch = cache.bn_stats
        grads["norm.scale"] = np.sum(g * xhat, axis=0)
        grads["norm.shift"] = g.sum(axis=0)
        inv = 1.0 / np.sqrt(var + nm.epsilon_bn)
        gx = g * nm.scale
        if batch:
            n = g.shape[0]
            g = inv / n * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
        else:
            g = gx * inv

    if model.preprocess_mode == "mlp":
        for k in reversed(range(len(model.preprocess))):
            layer = model.preprocess[k]
            g = _act_grad(layer.activation, cache.layer_pre[k], cache.layer_out[k], g)
            grads[f"preprocess.{k}.weights"] = cache.layer_inputs[k].T @ g
            grads[f"preprocess.{k}.bias"] = g.sum(axis=0)
            g = g @ layer.weights.T
    return g


def _finish(model, grads, g_xnorm, it, conv):
    ordered = {name: grads[name] for name in model.parameters()}
    for name, arr in ordered.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    return Gradients(ordered, g_xnorm, it, conv)


def backward_from_logits(model: DIGNNModel, cache: ForwardCache, g_logits, *,
                         strict=False) -> Gradients:
    """Implicit-differentiation gradients for an upstream gradient on the logits."""
    grads = {}
    dz = _output_backward(model, cache, np.asarray(g_logits, dtype=np.float64), grads)
    op, mu = cache.op, model.mu
    inv = 1.0 / mu
    # adjoint: V = dz - (1/mu) Delta^T V, so V = (I + Delta^T/mu)^{-1} dz
    v = dz.copy()
    converged = False
    it = 0
    for it in range(1, model.max_iter + 1):
        v_new = dz - inv * apply_transpose(op, v)
        if not np.all(np.isfinite(v_new)):
            raise NonFiniteGradient(f"adjoint iterate became non-finite at step {it}")
        r = float(np.linalg.norm(v_new - v))
        v = v_new
        if r <= model.tol:
            converged = True
            break
    if strict and not converged:
        raise AdjointNoConvergence(f"adjoint solve did not reach tol={model.tol} in {it} steps")
    g_coeff = None
    if model.laplacian_kind is Kind.PARAMETERIZED:
        g_coeff = -inv * arc_coeff_gradient(op, v, cache.z_star)
    _input_backward(model, cache, v, g_coeff, grads)
    return _finish(model, grads, v, it, converged)


def backward(model: DIGNNModel, cache: ForwardCache, labels, mask=None, *, strict=False) -> Gradients:
    """Gradients of the masked mean cross-entropy of ``cache.logits``."""
    return backward_from_logits(model, cache, cross_entropy_grad(cache.logits, labels, mask),
                                strict=strict)


def backward_unrolled_from_logits(model: DIGNNModel, cache: ForwardCache, g_logits) -> Gradients:
    """Backpropagation through the recorded forward iterates (no implicit step)."""
    if cache.iterates is None:
        raise ValueError("forward must be run with record_iterates=True")
    grads = {}
    gz = _output_backward(model, cache, np.asarray(g_logits, dtype=np.float64), grads)
    op = cache.op
    inv = 1.0 / model.mu
    kinds_param = model.laplacian_kind is Kind.PARAMETERIZED
    g_x = np.zeros_like(gz)
    g_coeff = np.zeros(cache.graph.num_arcs) if kinds_param else None
    zs = cache.iterates
    for k in range(len(zs) - 1, 0, -1):
        # Z_k = X - (1/mu) Delta Z_{k-1}
        g_x += gz
        if kinds_param:
            g_coeff -= inv * arc_coeff_gradient(op, gz, zs[k - 1])
        gz = -inv * apply_transpose(op, gz)
    _input_backward(model, cache, g_x, g_coeff, grads)
    return _finish(model, grads, g_x, len(zs) - 1, True)


def predict(logits) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.atleast_2d(logits), axis=1)


def _loss_at(model, g, X, labels, mask, graph_index):
    logits, _ = forward(model, g, X, training=True, rng=None, graph_index=graph_index)
    return loss_cross_entropy(logits, labels, mask)


def grad_check(model: DIGNNModel, g: Graph, X, labels, mask=None, step: float = 1e-5,
               graph_index=None) -> dict:
    """Central differences for every scalar parameter against :func:`backward`.

    Runs with batch statistics and no dropout. Returns the maximum relative
    error per parameter group, where an entry's error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` and ``floor``
    is 1e-7 times (1 + the group's largest numeric gradient) so that entries
    at round-off level are compared absolutely.
    """
    logits, cache = forward(model, g, X, training=True, rng=None, graph_index=graph_index)
    analytic = backward(model, cache, labels, mask).params
    numeric = {}
    for name, arr in model.parameters().items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            lp = _loss_at(model, g, X, labels, mask, graph_index)
            flat[k] = old - step
            lm = _loss_at(model, g, X, labels, mask, graph_index)
            flat[k] = old
            nflat[k] = (lp - lm) / (2 * step)
        numeric[name] = num
    report = {}
    for name in numeric:
        grp = param_group(name)
        a, n = analytic[name], numeric[name]
        floor = 1e-7 * (1.0 + float(np.max(np.abs(n), initial=0.0)))
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        report[grp] = max(report.get(grp, 0.0), float(np.max(err, initial=0.0)))
    return report


def monitor_bounds(model: DIGNNModel, X_tilde) -> dict:
    """Spectral-norm estimates of the geometry matrices and the implied bound.

    ``X_tilde`` is the input of the implicit layer (after batch norm).
    """
    if model.geometry is None:
        raise ValueError("bound monitoring applies to the parameterized kind only")
    nc = spectral_norm(model.geometry.theta_chi)
    nphi = spectral_norm(model.geometry.theta_phi)
    beta = float(np.max(np.linalg.norm(np.asarray(X_tilde, dtype=np.float64), axis=1), initial=0.0))
    B = max(nc, nphi)
    bound = spectral_bound_value(B, beta) if B > 0 and beta > 0 else 0.0
    return {
        "norm_theta_chi": nc,
        "norm_theta_phi": nphi,
        "beta_hat": beta,
        "bound": bound,
        "mu": model.mu,
        "ok": bool(model.mu > bound),
    }


# --- checkpoints ---------------------------------------------------------

def _layer_dict(layer):
    return {"weights": layer.weights.tolist(), "bias": layer.bias.tolist(),
            "activation": layer.activation}


def _layer_from(d):
    return DenseLayer(np.array(d["weights"], dtype=np.float64),
                      np.array(d["bias"], dtype=np.float64), d["activation"])


def model_to_dict(model: DIGNNModel) -> dict:
    d = {
        "mu": model.mu,
        "laplacian_kind": model.laplacian_kind.value,
        "preprocess_mode": model.preprocess_mode,
        "readout": model.readout,
        "tol": model.tol,
        "max_iter": model.max_iter,
        "dropout": model.dropout,
        "preprocess": [_layer_dict(layer) for layer in model.preprocess],
        "output": [_layer_dict(layer) for layer in model.output],
        "norm": None,
        "geometry": None,
    }
    if model.norm is not None:
        nm = model.norm
        d["norm"] = {"scale": nm.scale.tolist(), "shift": nm.shift.tolist(),
                     "running_mean": nm.running_mean.tolist(),
                     "running_var": nm.running_var.tolist(),
                     "epsilon_bn": nm.epsilon_bn, "momentum": nm.momentum}
    if model.geometry is not None:
        p = model.geometry
        d["geometry"] = {"theta_chi": p.theta_chi.tolist(), "theta_phi": p.theta_phi.tolist(),
                         "theta_varphi": p.theta_varphi.tolist(), "epsilon": p.epsilon,
                         "norm_bound_B": p.norm_bound_B, "embed_bound_beta": p.embed_bound_beta}
    return d


def model_from_dict(d: dict) -> DIGNNModel:
    norm = None
    if d.get("norm") is not None:
        n = d["norm"]
        norm = BatchNormState(*(np.array(n[k], dtype=np.float64) for k in
                                ("scale", "shift", "running_mean", "running_var")),
                              epsilon_bn=n["epsilon_bn"], momentum=n["momentum"])
    geometry = None
    if d.get("geometry") is not None:
        p = d["geometry"]
        geometry = GeometryParams(np.array(p["theta_chi"]), np.array(p["theta_phi"]),
                                  np.array(p["theta_varphi"]), p["epsilon"],
                                  p["norm_bound_B"], p["embed_bound_beta"])
    return DIGNNModel(
        preprocess=[_layer_from(x) for x in d["preprocess"]],
        output=[_layer_from(x) for x in d["output"]],
        mu=d["mu"], laplacian_kind=Kind(d["laplacian_kind"]), geometry=geometry, norm=norm,
        preprocess_mode=d["preprocess_mode"], readout=d["readout"], tol=d["tol"],
        max_iter=d["max_iter"], dropout=d["dropout"],
    )


def save_checkpoint(model: DIGNNModel, path, config=None, rng_state=None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model_to_dict(model),
        "config": config,
        "rng_state": rng_state,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Return ``(model, document)`` from a file written by :func:`save_checkpoint`."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return model_from_dict(doc["model"]), doc


def accuracy(logits, labels, idx) -> float:
    idx = np.asarray(idx)
    if idx.size == 0:
        raise EmptySplit("split is empty")
    return float(np.mean(predict(logits[idx]) == np.asarray(labels)[idx]))
