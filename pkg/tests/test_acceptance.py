"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the pytest terminal
summary. Run it alone with ``pytest tests/test_acceptance.py -v``.
"""

import filecmp
import itertools
import time
import warnings

import numpy as np
import pytest

from dignn.cli import main as cli_main
from dignn.data import synth_sbm
from dignn.equilibrium import (
    ConstraintSet,
    build_constrained_system,
    build_markov,
    solve_constrained,
    solve_direct,
    solve_implicit_layer,
    stationary_distribution,
)
from dignn.graph import build_graph
from dignn.laplacian import (
    GeometryParams,
    Kind,
    build_canonical,
    build_parameterized,
    dirichlet_energy,
    dirichlet_energy_gradient,
    edge_inner_product,
    graph_divergence,
    graph_gradient,
    vertex_inner_product,
)
from dignn.model import (
    DIGNNModel,
    backward_from_logits,
    backward_unrolled_from_logits,
    cross_entropy_grad,
    forward,
    grad_check,
)
from dignn.oversmoothing import check_osi, check_ost, smoothing_trajectory
from dignn.spectral import spectral_bound_value
from dignn.training import TrainConfig, evaluate, train

from helpers import (
    ALL_KINDS,
    chi_norm,
    dense_lambda_max,
    random_connected_graph,
    random_non_bipartite_graph,
    random_operator,
)


def _calculus_args(op):
    k = op.kernel
    deg = op.degree if op.kind is Kind.NORMALIZED else None
    return k, deg


# 1 -------------------------------------------------------------------------

def test_c01_operator_algebra(record_criterion):
    tol = 1e-10
    worst = {"adjoint": 0.0, "composition": 0.0, "self_adjoint": 0.0, "psd": 0.0, "energy": 0.0}
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    for inst in range(100):
        n = int(rng.integers(2, 101))
        g = random_connected_graph(rng, n)
        kind = ALL_KINDS[inst % 4]
        op = random_operator(rng, g, kind)
        k, deg = _calculus_args(op)
        c = int(rng.integers(1, 4))
        f = rng.standard_normal((n, c))
        h = rng.standard_normal((n, c))
        G = rng.standard_normal((g.num_arcs, c))

        grad_f = graph_gradient(f, g, k.varphi, deg)
        div_G = graph_divergence(G, g, op.chi, k.phi, k.varphi, deg)
        lhs = edge_inner_product(grad_f, G, k.phi)
        rhs = vertex_inner_product(f, -div_G, op.chi)
        # scale: sum of absolute terms of the edge inner product
        scale = 0.5 * float(np.sum(np.abs(grad_f * G) * k.phi[:, None]))
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / scale)

        lap_f = op.apply(f)
        comp = -graph_divergence(grad_f, g, op.chi, k.phi, k.varphi, deg)
        worst["composition"] = max(worst["composition"],
                                   np.linalg.norm(lap_f - comp) / np.linalg.norm(lap_f))

        a = vertex_inner_product(lap_f, h, op.chi)
        b = vertex_inner_product(f, op.apply(h), op.chi)
        scale = float(np.sum(op.chi[:, None] * (np.abs(lap_f * h) + np.abs(f * op.apply(h)))))
        worst["self_adjoint"] = max(worst["self_adjoint"], abs(a - b) / scale)

        q = vertex_inner_product(f, lap_f, op.chi)
        qscale = float(np.sum(op.chi[:, None] * np.abs(f * lap_f)))
        worst["psd"] = max(worst["psd"], max(0.0, -q) / qscale)

        s = dirichlet_energy(op, f)
        worst["energy"] = max(worst["energy"], abs(s - q) / max(abs(s), abs(q)))
    elapsed = time.perf_counter() - start
    ok = all(v <= tol for v in worst.values()) and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    record_criterion(1, "operator algebra (100 instances, 4 kinds)", ok, detail)
    assert ok, detail


# 2 -------------------------------------------------------------------------

def test_c02_energy_gradient(record_criterion):
    rng = np.random.default_rng(202)
    worst = 0.0
    start = time.perf_counter()
    step = 1e-4
    for inst in range(20):
        n = int(rng.integers(3, 25))
        g = random_connected_graph(rng, n)
        op = random_operator(rng, g, ALL_KINDS[inst % 4])
        f = rng.standard_normal((n, 2))
        analytic = dirichlet_energy_gradient(op, f)
        numeric = np.zeros_like(f)
        for idx in np.ndindex(*f.shape):
            e = np.zeros_like(f)
            e[idx] = step
            numeric[idx] = (dirichlet_energy(op, f + e) - dirichlet_energy(op, f - e)) / (2 * step)
        worst = max(worst, np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 5
    record_criterion(2, "energy gradient vs central differences", ok,
                     f"max rel {worst:.1e}; {elapsed:.1f}s")
    assert ok


# 3 -------------------------------------------------------------------------

def _scaled_to_norm(M, target):
    return M * (target / np.linalg.norm(M, 2))


def test_c03_spectral_bound(record_criterion):
    rng = np.random.default_rng(303)
    worst_gap = -np.inf
    start = time.perf_counter()
    for _ in range(100):
        n = int(rng.integers(2, 41))
        d = int(rng.integers(1, 5))
        g = random_connected_graph(rng, n)
        B = float(rng.uniform(0.2, 2.0))
        beta = float(rng.uniform(0.2, 2.0))
        X = rng.standard_normal((n, d))
        X *= (beta * rng.uniform(0.1, 1.0, size=(n, 1))) / np.linalg.norm(X, axis=1, keepdims=True)
        hc, hp, hv = (int(x) for x in rng.integers(1, 5, size=3))
        tc = _scaled_to_norm(rng.standard_normal((hc, d)), B * rng.uniform(0.2, 1.0))
        tp = _scaled_to_norm(rng.standard_normal((hp, hc)), B * rng.uniform(0.2, 1.0))
        tv = rng.standard_normal((hv, d))
        p = GeometryParams(tc, tp, tv, norm_bound_B=B, embed_bound_beta=beta)
        op = build_parameterized(g, X, p)
        lam = dense_lambda_max(op)
        worst_gap = max(worst_gap, lam - spectral_bound_value(B, beta))
    elapsed = time.perf_counter() - start
    ok = worst_gap <= 1e-8 and elapsed < 30
    record_criterion(3, "spectral bound 2B^3 beta cosh(B beta)", ok,
                     f"max(lambda_max - bound) {worst_gap:.3g}; {elapsed:.1f}s")
    assert ok


# 4 -------------------------------------------------------------------------

def test_c04_convergence_rate(record_criterion):
    rng = np.random.default_rng(404)
    violations = 0
    start = time.perf_counter()
    for inst in range(20):
        n = int(rng.integers(3, 60))
        g = random_connected_graph(rng, n)
        op = random_operator(rng, g, ALL_KINDS[inst % 4])
        lam = dense_lambda_max(op)
        mu = lam * float(rng.uniform(1.1, 1.5))
        X = rng.standard_normal((n, 2))
        Z_ref = solve_direct(op, X, mu)
        ref_norm = chi_norm(Z_ref, op.chi)
        iterates = []
        solve_implicit_layer(op, X, mu, tol=0.0, max_iter=50, check=False,
                             callback=lambda t, z: iterates.append(z))
        for t, Z in enumerate(iterates, 1):
            if chi_norm(Z - Z_ref, op.chi) > ref_norm * (lam / mu) ** t:
                violations += 1

    # random-walk kind with mu = 4: lambda_max <= 2 so successive steps shrink by 1/2
    worst_ratio = 0.0
    for _ in range(20):
        n = int(rng.integers(3, 60))
        op = build_canonical(random_connected_graph(rng, n), Kind.RANDOM_WALK)
        iterates = [np.zeros((n, 2))]
        X = rng.standard_normal((n, 2))
        solve_implicit_layer(op, X, 4.0, tol=0.0, max_iter=60, check=False,
                             callback=lambda t, z: iterates.append(z))
        steps = [chi_norm(b - a, op.chi) for a, b in zip(iterates, iterates[1:])]
        for r0, r1 in zip(steps, steps[1:]):
            if r0 > 1e-12 * steps[0]:
                worst_ratio = max(worst_ratio, r1 / r0)
    elapsed = time.perf_counter() - start
    ok = violations == 0 and worst_ratio <= 0.5 + 1e-6 and elapsed < 10
    record_criterion(4, "geometric convergence rate", ok,
                     f"{violations} bound violations over t<=50; RW mu=4 max step ratio "
                     f"{worst_ratio:.6f}; {elapsed:.1f}s")
    assert ok


# 5 -------------------------------------------------------------------------

def test_c05_oracle_equivalence(record_criterion):
    rng = np.random.default_rng(505)
    worst = 0.0
    start = time.perf_counter()
    for inst in range(50):
        n = int(rng.integers(2, 201))
        g = random_connected_graph(rng, n)
        op = random_operator(rng, g, ALL_KINDS[inst % 4])
        mu = dense_lambda_max(op) * float(rng.uniform(1.2, 3.0)) + 1e-3
        X = rng.standard_normal((n, int(rng.integers(1, 4))))
        res = solve_implicit_layer(op, X, mu, tol=1e-12, max_iter=100_000, check=False)
        worst = max(worst, float(np.linalg.norm(res.z_star - solve_direct(op, X, mu))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 20
    record_criterion(5, "fixed point vs dense solve", ok,
                     f"max Frobenius gap {worst:.1e}; {elapsed:.1f}s")
    assert ok


# 6 -------------------------------------------------------------------------

def _contractive_system(rng, kind=None, max_gamma=0.5):
    """Constrained system whose iteration matrix has spectral norm <= max_gamma."""
    while True:
        n = int(rng.integers(4, 30))
        g = random_connected_graph(rng, n)
        op = random_operator(rng, g, kind or ALL_KINDS[int(rng.integers(3))])
        lam = dense_lambda_max(op)
        mu = lam * float(rng.uniform(2.5, 4.0))
        nodes = rng.permutation(n)[: int(rng.integers(max(1, n - 2), n + 1))]
        cs = ConstraintSet(n, nodes, rng.standard_normal((nodes.size, 2)))
        system = build_constrained_system(op, build_markov(op), cs, mu)
        if np.linalg.norm(system.dense(), 2) <= max_gamma:
            return g, op, cs, mu, system


def test_c06_uniqueness(record_criterion):
    rng = np.random.default_rng(606)
    tol = 1e-6
    worst = 0.0
    for _ in range(20):
        _, _, _, _, system = _contractive_system(rng)
        n, c = system.padded_targets.shape
        sols = [solve_constrained(system, tol, 100_000, f0=10 * rng.standard_normal((n, c))).z_star
                for _ in range(5)]
        for a, b in itertools.combinations(sols, 2):
            worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst <= 2 * tol
    record_criterion(6, "unique equilibrium from 5 starts", ok,
                     f"max pairwise gap {worst:.2e} (limit {2 * tol:.0e})")
    assert ok


# 7 -------------------------------------------------------------------------

def test_c07_ost(record_criterion):
    rng = np.random.default_rng(707)
    tol = 1e-6
    worst_fixed = 0.0
    differing = 0
    par_gaps = []
    for _ in range(20):
        g, op, cs, mu, _ = _contractive_system(rng)
        n = g.num_nodes
        X_a, X_b = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        fixed = check_ost(g, op.kind, cs, X_a, X_b, mu, tol, 100_000)
        worst_fixed = max(worst_fixed, fixed.max_abs_difference)

        p = GeometryParams.init(2, rng)
        lam = max(dense_lambda_max(build_parameterized(g, X, p)) for X in (X_a, X_b))
        par = check_ost(g, Kind.PARAMETERIZED, cs, X_a, X_b, 3.0 * lam, tol, 100_000, geometry=p)
        par_gaps.append(par.max_abs_difference)
        differing += par.max_abs_difference > 100 * tol
    ok = worst_fixed <= 2 * tol and differing >= 18
    record_criterion(7, "feature-independent equilibria for fixed geometry", ok,
                     f"fixed max gap {worst_fixed:.1e}; parameterized differs on "
                     f"{differing}/20 (min gap {min(par_gaps):.1e})")
    assert ok


# 8 -------------------------------------------------------------------------

def test_c08_osi(record_criterion):
    rng = np.random.default_rng(808)
    worst_row = 0.0
    worst_pi = 0.0
    for _ in range(20):
        n = int(rng.integers(3, 40))
        g = random_non_bipartite_graph(rng, n)
        markov = build_markov(build_canonical(g, Kind.RANDOM_WALK))
        pi = stationary_distribution(markov)
        worst_pi = max(worst_pi, float(np.max(np.abs(markov.matrix().T @ pi - pi))))
        rep = check_osi(markov, rng.standard_normal((n, 2)), tol=1e-6)
        worst_row = max(worst_row, rep.max_row_deviation)
    tp = build_graph(4, [(0, 1), (1, 2), (0, 2), (0, 3)])
    rep = check_osi(build_markov(build_canonical(tp, Kind.RANDOM_WALK)), [1.0, 0, 0, 0])
    fixture_ok = abs(rep.predicted_row[0] - 3 / 8) < 1e-15 and rep.max_row_deviation <= 1e-6
    ok = worst_row <= 1e-6 and worst_pi <= 1e-12 and fixture_ok
    record_criterion(8, "diffusion collapses to (pi f0)^T", ok,
                     f"max row deviation {worst_row:.1e}; |pi P - pi| {worst_pi:.1e}; "
                     f"triangle+pendant limit {rep.limit_rows[:, 0].mean():.9f}")
    assert ok


# 9 -------------------------------------------------------------------------

def _gradcheck_instance(rng, n=10, d=3):
    g = random_connected_graph(rng, n, weighted=False)
    return g, rng.standard_normal((n, d)), rng.integers(0, 2, size=n)


def _unrolled_gap(model, g, X, y, K):
    ref_logits, ref_cache = forward(model, g, X, training=True, tol=1e-14, max_iter=10_000)
    implicit = backward_from_logits(model, ref_cache, cross_entropy_grad(ref_logits, y)).params
    logits, cache = forward(model, g, X, training=True, tol=0.0, max_iter=K, record_iterates=True)
    unrolled = backward_unrolled_from_logits(model, cache, cross_entropy_grad(logits, y)).params
    return max(float(np.max(np.abs(implicit[k] - unrolled[k]))) for k in implicit)


def test_c09_implicit_differentiation(record_criterion):
    rng = np.random.default_rng(909)
    start = time.perf_counter()
    worst = 0.0
    gaps = []
    for seed in range(10):
        g, X, y = _gradcheck_instance(rng)
        for kind in (Kind.RANDOM_WALK, Kind.PARAMETERIZED):
            model = DIGNNModel.create(3, 4, 2, kind=kind, mu=2.5, seed=seed, activation="tanh",
                                      tol=1e-12, max_iter=5000)
            report = grad_check(model, g, X, y)
            worst = max(worst, max(report.values()))
            # unrolled comparison needs a contraction ratio lambda_max/mu well below 0.8
            _, cache = forward(model, g, X, training=True)
            model.mu = max(5.0, 2.5 * dense_lambda_max(cache.op))
            gaps.append([_unrolled_gap(model, g, X, y, K) for K in (10, 20, 40)])
    elapsed = time.perf_counter() - start
    gaps = np.array(gaps)
    shrinking = bool(np.all((gaps[:, 1] <= gaps[:, 0]) & (gaps[:, 2] <= gaps[:, 1])))
    ok = worst < 1e-4 and gaps[:, 2].max() < 1e-6 and shrinking and elapsed < 60
    record_criterion(9, "implicit gradients", ok,
                     f"grad_check max rel {worst:.1e}; unrolled gap K=10/20/40 "
                     f"{gaps[:, 0].max():.1e}/{gaps[:, 1].max():.1e}/{gaps[:, 2].max():.1e}; "
                     f"{elapsed:.1f}s")
    assert ok


# 10 / 11 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_sbm():
    start = time.perf_counter()
    ds = synth_sbm(200, 2, 0.1, 0.01, feature_dim=16, feature_noise=1.0, seed=0)
    cfg = TrainConfig(lr=0.001, epochs=200, seed=0, hidden=64)
    out = {}
    for kind in (Kind.RANDOM_WALK, Kind.PARAMETERIZED):
        model = DIGNNModel.create(16, cfg.hidden, 2, kind=kind, mu=2.5, seed=0, tol=1e-6,
                                  max_iter=10)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = train(model, ds, cfg)
        out[kind] = (model, report)
    return ds, out, time.perf_counter() - start


def test_c10_desk_scale_learning(record_criterion, trained_sbm):
    _, runs, elapsed = trained_sbm
    rw = runs[Kind.RANDOM_WALK][1].test_acc
    par = runs[Kind.PARAMETERIZED][1].test_acc
    ok = rw >= 0.95 and par >= rw - 0.02 and elapsed < 120
    record_criterion(10, "SBM training", ok,
                     f"random-walk test acc {rw:.3f}, parameterized {par:.3f}; {elapsed:.1f}s")
    assert ok


def test_c11_depth_stability(record_criterion, trained_sbm):
    ds, runs, _ = trained_sbm
    model = runs[Kind.RANDOM_WALK][0]
    acc10 = evaluate(model, ds, "test", max_iter=10)
    acc100 = evaluate(model, ds, "test", max_iter=100)
    markov = build_markov(build_canonical(ds.graph, Kind.RANDOM_WALK))
    traj = smoothing_trajectory(markov, ds.features, 100)
    var100 = traj[-1][2]
    ok = abs(acc100 - acc10) * 100 <= 0.1 and var100 < 1e-6
    record_criterion(11, "depth stability vs explicit diffusion", ok,
                     f"test acc {acc10:.4f} (10 iters) vs {acc100:.4f} (100 iters); "
                     f"P^100 row variance {var100:.1e} (from {traj[0][2]:.1f})")
    assert ok


# 12 ------------------------------------------------------------------------

CLI_RUNS = [
    ("spectrum", ["--kind", "parameterized"]),
    ("solve", ["--fixture", "k2", "--set", "x=[[1],[0]]", "--max-iter", "200"]),
    ("demo-ost", []),
    ("demo-osi", ["--fixture", "triangle_pendant"]),
    ("gradcheck", []),
    ("gen-data", []),
    ("train", ["--epochs", "30"]),
    ("eval", []),
]


def _run_all(root, capsys):
    stdout = {}
    for cmd, extra in CLI_RUNS:
        out = root / ("train" if cmd in ("train", "eval") else cmd)
        code = cli_main([cmd, "--seed", "7", "--threads", "1", "--out", str(out), *extra])
        stdout[cmd] = (code, capsys.readouterr().out)
    return stdout


def _tree_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(
        _tree_identical(a / d, b / d) for d in cmp.common_dirs)


def test_c12_cli_reproducibility(record_criterion, tmp_path, capsys):
    first = _run_all(tmp_path / "run1", capsys)
    second = _run_all(tmp_path / "run2", capsys)
    same_files = _tree_identical(tmp_path / "run1", tmp_path / "run2")
    same_stdout = first == second
    codes = {cmd: code for cmd, (code, _) in first.items()}
    ok = same_files and same_stdout and all(c == 0 for c in codes.values())
    record_criterion(12, "byte-identical CLI reruns", ok,
                     f"{len(CLI_RUNS)} subcommands; files identical {same_files}, "
                     f"stdout identical {same_stdout}, exit codes {sorted(set(codes.values()))}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
