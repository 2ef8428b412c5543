"""Built-in self checks: fast numerical invariants runnable from the CLI.

Each check returns (name, passed, detail). They are small enough to run in
seconds and catch the usual breakage modes: a wrong gradient, an aggregation
that stopped being order-free, a likelihood that no longer normalizes, or a
contraction that drifted from its definition.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import zinb
from .data import Assignment, ODTensor, mode_product
from .model import ModelConfig, forward, init_params


def _tiny_setup(seed: int = 0):
    rng = np.random.default_rng(seed)
    n, m, k = 8, 3, 4
    cfg = ModelConfig(n_cells=n, n_supercells=m, history=k, horizon=1,
                      d=8, heads=2, n_queries=4, poi_dim=3)
    labels = rng.integers(0, m, size=n)
    labels[:m] = np.arange(m)
    assignment = Assignment.from_labels(labels, m)
    poi = (rng.random((m, 3)) < 0.5).astype(np.float64)
    hist = rng.poisson(1.0, size=(n, n, k)).astype(np.float64)
    fut = rng.poisson(1.0, size=(n, n, 1)).astype(np.float64)
    return cfg, assignment, poi, hist, fut


def check_gradients(seed: int = 0, tol: float = 1e-4):
    """Finite-difference check of the full nll gradient on a tiny model."""
    cfg, assignment, poi, hist, fut = _tiny_setup(seed)
    params = init_params(cfg, seed=seed)
    point = {name: t.values for name, t in params.items()}

    def f(tensors):
        return zinb.nll(fut, forward(hist, assignment, poi, tensors, cfg))

    report = ad.grad_check(f, point, tol=tol)
    worst = max(report.per_param, key=report.per_param.get)
    return ("gradient-fidelity", report.passed,
            f"max relative error {report.max_rel_err:.3e} (worst group {worst})")


def check_permutation_invariance(seed: int = 0, n_perms: int = 20,
                                 tol: float = 1e-9):
    """Relabeling super-cells must permute flow embeddings, nothing more."""
    from .model import od_embed
    rng = np.random.default_rng(seed)
    m, k = 6, 4
    cfg = ModelConfig(n_cells=m, n_supercells=m, history=k, horizon=1,
                      d=8, heads=2, n_queries=4, poi_dim=2)
    params = init_params(cfg, seed=seed)
    x = rng.poisson(2.0, size=(1, m, m, k)).astype(np.float64)
    base = od_embed(x, params, cfg).values[0]
    worst = 0.0
    for _ in range(n_perms):
        sigma = rng.permutation(m)
        xp = x[:, sigma][:, :, sigma]
        out = od_embed(xp, params, cfg).values[0]
        worst = max(worst, float(np.abs(out - base[sigma]).max()))
    return ("permutation-invariance", worst <= tol,
            f"max row discrepancy {worst:.3e} over {n_perms} relabelings")


def check_zinb_normalization(tol: float = 1e-6, x_max: int = 4000):
    """Truncated pmf mass close to 1 across a parameter grid."""
    x = np.arange(x_max + 1, dtype=np.float64)
    worst = 1.0
    for n in (0.5, 1.0, 2.0, 4.0, 8.0):
        for p in (0.2, 0.35, 0.5, 0.7, 0.9):
            for pi in (0.0, 0.3, 0.6):
                mass = np.exp(zinb.log_pmf(x, n, p, pi)).sum()
                worst = min(worst, float(mass))
    return ("zinb-normalization", worst >= 1.0 - tol,
            f"smallest truncated mass {worst:.12f}")


def check_zinb_moments(seed: int = 0, tol: float = 0.01):
    """Analytic NB mean against a large Monte-Carlo draw."""
    rng = np.random.default_rng(seed)
    n, p = 3.0, 0.4
    sample = rng.negative_binomial(n, p, size=200_000)
    analytic = zinb.mean(n, p)
    rel = abs(sample.mean() - analytic) / analytic
    return ("zinb-mean", rel <= tol,
            f"analytic {analytic:.4f} vs sampled {sample.mean():.4f} "
            f"(relative error {rel:.2%})")


def check_mode_product(seed: int = 0, n_cases: int = 20, tol: float = 0.0):
    """Vectorized tensor contraction against a triple-loop reference."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(1, n + 1))
        t = int(rng.integers(1, 4))
        x = rng.poisson(1.5, size=(n, n, t)).astype(np.float64)
        labels = rng.integers(0, m, size=n)
        labels[:m] = np.arange(m)
        y = Assignment.from_labels(labels, m).data
        ref = np.zeros((m, n, t))
        for a in range(m):
            for i in range(n):
                if y[i, a]:
                    ref[a] += x[i]
        got = mode_product(ODTensor(x), y, mode=1)
        worst = max(worst, float(np.abs(got - ref).max()))
    return ("mode-product", worst <= tol,
            f"max deviation from loop reference {worst:.3e} over {n_cases} cases")


def check_propagation_invariant(seed: int = 0):
    """Seed rows must stay one-hot after every propagation sweep."""
    from .coarsening import propagate
    rng = np.random.default_rng(seed)
    n, m = 7, 2
    w = rng.random((n, n))
    np.fill_diagonal(w, 0.0)
    t_sem = w / w.sum(axis=1, keepdims=True)
    t_geo = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(t_geo, 0.0)
    y0 = np.zeros((n, m))
    y0[:m] = np.eye(m)
    drift = []

    def watch(it, y):
        drift.append(float(np.abs(y[:m] - np.eye(m)).max()))

    propagate(y0, t_sem, t_geo, callback=watch)
    worst = max(drift) if drift else 1.0
    return ("propagation-identity", worst == 0.0,
            f"max seed-row drift {worst:.3e} over {len(drift)} sweeps")


ALL_CHECKS = (
    check_mode_product,
    check_propagation_invariant,
    check_permutation_invariance,
    check_zinb_normalization,
    check_zinb_moments,
    check_gradients,
)


def run_all(verbose: bool = True) -> bool:
    """Run every check; print one PASS/FAIL line each; True if all pass."""
    ok = True
    for check in ALL_CHECKS:
        name, passed, detail = check()
        ok = ok and passed
        if verbose:
            print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return ok
