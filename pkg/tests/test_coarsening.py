"""Flow stats, transition matrices, label propagation, and recovery."""

import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from odforecast.coarsening import (CoarseningParams, LabelMatrix,
                                   adjusted_rand_index, assign,
                                   build_geo_transition, build_sem_transition,
                                   coarsen, compute_flow_stats,
                                   downsample_low_spatial, downsample_mean_pool,
                                   low_spatial_assignment, propagate,
                                   select_dense)
from odforecast.data import Assignment, CellGrid, DataError, ODTensor
from odforecast.synth import SynthConfig, build_hex_grid, generate_synthetic


def flow_tensor(seed=0, n=6, t=4):
    rng = np.random.default_rng(seed)
    return ODTensor(rng.poisson(2.0, size=(n, n, t)).astype(float))


# ---------------------------------------------------------------------------
# flow statistics and seed selection

def test_flow_stats_match_hand_loop():
    od = flow_tensor()
    x = od.data
    expected = np.array([np.mean([x[i, :, t].sum() + x[:, i, t].sum()
                                  for t in range(x.shape[2])])
                         for i in range(x.shape[0])])
    stats = compute_flow_stats(od)
    assert_allclose(stats.f, expected, rtol=1e-12)


def test_select_dense_takes_largest_and_breaks_ties_low():
    stats = compute_flow_stats(flow_tensor())
    dense, sparse = select_dense(stats, 2)
    order = np.argsort(-stats.f, kind="stable")
    assert set(dense) == set(order[:2])
    assert_array_equal(np.sort(np.concatenate([dense, sparse])), np.arange(6))
    # explicit tie: equal totals resolve toward the lower cell index
    x = np.ones((3, 3, 1))
    tied = compute_flow_stats(ODTensor(x))
    d, _ = select_dense(tied, 1)
    assert d[0] == 0


# ---------------------------------------------------------------------------
# transition matrices

def hex7():
    return build_hex_grid(7, radius_km=0.5)


def test_geo_transition_uniform_over_neighbors():
    t = build_geo_transition(hex7(), l_km=1.05)
    # center cell 0 touches all six ring cells
    assert_allclose(t[0, 1:], np.full(6, 1.0 / 6.0))
    assert t[0, 0] == 0.0
    assert_allclose(t.sum(axis=1), np.ones(7))


def test_geo_transition_radius_is_strict():
    grid = hex7()
    # ring neighbors are exactly 1.0 km apart; a 0.99 km radius isolates them
    t = build_geo_transition(grid, l_km=0.99)
    assert_array_equal(np.diag(t), np.ones(7))


def test_geo_transition_isolated_cell_self_loops():
    grid = CellGrid(lon=np.array([0.0, 0.5]), lat=np.array([0.0, 0.0]),
                    radius_km=0.5)
    t = build_geo_transition(grid, l_km=1.0)
    assert t[0, 0] == 1.0 and t[1, 1] == 1.0


def test_sem_transition_symmetrizes_and_normalizes():
    x = np.zeros((3, 3, 2))
    x[0, 1] = [4.0, 2.0]     # mean 3
    x[1, 0] = [0.0, 2.0]     # mean 1 -> symmetrized weight 4
    x[2, 0] = [2.0, 2.0]     # mean 2 -> weight 0-2 pair 2
    t = build_sem_transition(ODTensor(x))
    assert_allclose(t[0], [0.0, 4.0 / 6.0, 2.0 / 6.0])
    assert_allclose(t[1], [1.0, 0.0, 0.0])
    assert_allclose(t[2], [1.0, 0.0, 0.0])
    assert_allclose(t.sum(axis=1), np.ones(3))


def test_sem_transition_zero_row_self_loops():
    x = np.zeros((3, 3, 1))
    x[0, 1, 0] = 5.0
    t = build_sem_transition(ODTensor(x))
    assert t[2, 2] == 1.0


# ---------------------------------------------------------------------------
# propagation against an explicit power-iteration oracle

def propagate_oracle(y0, t_sem, t_geo, alpha, beta, n_steps):
    y = y0.copy()
    m = int(y0[: y0.shape[1]].shape[0])
    for _ in range(n_steps):
        y = alpha * (t_sem @ y) + beta * (t_geo @ y)
        y[:m] = np.eye(m)
    return y


def random_transitions(seed, n):
    rng = np.random.default_rng(seed)
    w = rng.random((n, n))
    np.fill_diagonal(w, 0.0)
    t_sem = w / w.sum(axis=1, keepdims=True)
    g = (rng.random((n, n)) < 0.5).astype(float)
    g = np.maximum(g, g.T)
    np.fill_diagonal(g, 0.0)
    g[g.sum(axis=1) == 0] = 1.0
    np.fill_diagonal(g, 0.0)
    t_geo = g / np.maximum(g.sum(axis=1, keepdims=True), 1.0)
    deficit = 1.0 - t_geo.sum(axis=1)
    t_geo[np.arange(n), np.arange(n)] += deficit
    return t_sem, t_geo


def test_propagate_matches_power_iteration():
    for seed, n, m in ((0, 3, 2), (1, 6, 2), (2, 6, 3)):
        t_sem, t_geo = random_transitions(seed, n)
        y0 = np.zeros((n, m))
        y0[:m] = np.eye(m)
        oracle = propagate_oracle(y0, t_sem, t_geo, 0.5, 0.5, 100)
        result = propagate(y0, t_sem, t_geo, tol=1e-15, max_iter=100)
        assert np.abs(result.labels.y - oracle).max() <= 1e-8


def test_propagate_keeps_seed_rows_identity_every_iteration():
    t_sem, t_geo = random_transitions(3, 6)
    y0 = np.zeros((6, 2))
    y0[:2] = np.eye(2)
    seen = []

    def watch(it, y):
        seen.append(np.abs(y[:2] - np.eye(2)).max())

    propagate(y0, t_sem, t_geo, callback=watch)
    assert len(seen) > 0
    assert max(seen) == 0.0


def test_propagate_requires_convex_combination():
    t_sem, t_geo = random_transitions(4, 4)
    y0 = np.zeros((4, 2))
    y0[:2] = np.eye(2)
    with pytest.raises(DataError):
        propagate(y0, t_sem, t_geo, alpha=0.7, beta=0.7)


def test_propagate_warns_when_not_converged():
    t_sem, t_geo = random_transitions(5, 6)
    y0 = np.zeros((6, 2))
    y0[:2] = np.eye(2)
    with pytest.warns(RuntimeWarning):
        result = propagate(y0, t_sem, t_geo, tol=0.0, max_iter=3)
    assert not result.converged
    assert result.n_iter == 3


def test_assign_argmax_with_fallback():
    y = np.array([[1.0, 0.0], [0.0, 1.0], [0.2, 0.8], [0.0, 0.0]])
    fallback = np.array([0, 1, 0, 0])
    a = assign(LabelMatrix(y), fallback=fallback, n_supercells=2)
    assert_array_equal(a.labels(), [0, 1, 1, 0])


def test_assign_breaks_ties_toward_lower_column():
    y = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    a = assign(LabelMatrix(y), fallback=np.zeros(3, dtype=int), n_supercells=2)
    assert a.labels()[2] == 0


# ---------------------------------------------------------------------------
# end-to-end coarsening

def test_coarsen_recovers_planted_communities():
    cfg = SynthConfig(n_cells=40, n_communities=4, n_slots=72, poi_dim=4)
    out = generate_synthetic(cfg, seed=2)
    result = coarsen(out["od"], out["grid"], 4)
    ari = adjusted_rand_index(result.assignment.labels(),
                              out["truth"].labels())
    assert ari >= 0.9
    assert result.converged


def test_coarsen_output_consistency():
    cfg = SynthConfig(n_cells=30, n_communities=3, n_slots=48, poi_dim=4)
    out = generate_synthetic(cfg, seed=1)
    result = coarsen(out["od"], out["grid"], 3)
    assert result.x_s.n_cells == 3
    assert result.x_s.n_slots == 48
    assert_allclose(result.x_s.data.sum(), out["od"].data.sum(), rtol=1e-12)
    # each dense seed belongs to its own super-cell
    labels = result.assignment.labels()
    assert len({labels[c] for c in result.dense_cells}) == 3


def test_adjusted_rand_index_against_sklearn():
    from sklearn.metrics import adjusted_rand_score
    rng = np.random.default_rng(6)
    for _ in range(20):
        n = int(rng.integers(5, 30))
        a = rng.integers(0, 4, size=n)
        b = rng.integers(0, 3, size=n)
        assert_allclose(adjusted_rand_index(a, b), adjusted_rand_score(a, b),
                        atol=1e-12)
    same = rng.integers(0, 3, size=12)
    assert adjusted_rand_index(same, same) == 1.0


# ---------------------------------------------------------------------------
# reference downsamplers

def test_low_spatial_groups_center_with_ring():
    grid = build_hex_grid(7, radius_km=0.5)
    a = low_spatial_assignment(grid)
    assert a.n_supercells == 1
    assert_array_equal(a.labels(), np.zeros(7, dtype=int))


def test_downsamplers_preserve_total_demand():
    cfg = SynthConfig(n_cells=30, n_communities=3, n_slots=24, poi_dim=4)
    out = generate_synthetic(cfg, seed=9)
    low = downsample_low_spatial(out["od"], out["grid"])
    assert_allclose(low.data.sum(), out["od"].data.sum(), rtol=1e-12)
    pooled = downsample_mean_pool(out["od"], patch=3)
    assert pooled.n_cells == 10
