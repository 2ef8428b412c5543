"""Synthetic city generator: geometry, sparsity regime, planted structure."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from odforecast.data import DataError, pairwise_distances_km, sparsity_rate
from odforecast.synth import SynthConfig, build_hex_grid, generate_synthetic


def test_hex_grid_neighbor_spacing():
    # hexagonal packing: nearest centers one cell diameter apart; the local
    # flat projection costs ~1e-4 relative at mid latitudes
    grid = build_hex_grid(19, radius_km=0.6, origin_lon=116.4, origin_lat=39.9)
    d = pairwise_distances_km(grid)
    np.fill_diagonal(d, np.inf)
    nearest = d.min(axis=1)
    assert_allclose(nearest, 1.2, rtol=1e-3)
    equator = build_hex_grid(19, radius_km=0.6, origin_lon=0.0, origin_lat=0.0)
    d0 = pairwise_distances_km(equator)
    np.fill_diagonal(d0, np.inf)
    assert_allclose(d0.min(axis=1), 1.2, rtol=1e-6)


def test_hex_grid_center_cell_has_six_neighbors():
    grid = build_hex_grid(7, radius_km=0.5, origin_lon=0.0, origin_lat=0.0)
    d = pairwise_distances_km(grid)
    ring = d[0, 1:]
    assert_allclose(ring, 1.0, rtol=1e-6)


def test_hex_grid_unique_centers():
    grid = build_hex_grid(64, radius_km=0.4, origin_lon=10.0, origin_lat=50.0)
    assert grid.n_cells == 64


def test_generate_shapes_and_types():
    cfg = SynthConfig(n_cells=30, n_communities=3, n_slots=48,
                      slots_per_day=24, poi_dim=5)
    out = generate_synthetic(cfg, seed=1)
    assert out["od"].data.shape == (30, 30, 48)
    assert out["grid"].n_cells == 30
    assert out["poi"].data.shape == (30, 5)
    assert out["truth"].n_cells == 30
    assert out["truth"].n_supercells == 3
    counts = out["od"].data
    assert_allclose(counts, np.round(counts))


def test_default_scale_sparsity_in_target_band():
    out = generate_synthetic(SynthConfig(), seed=0)
    rate = sparsity_rate(out["od"])
    assert 0.95 <= rate <= 0.995


def test_total_inflation_gives_all_zeros():
    cfg = SynthConfig(n_cells=20, n_communities=2, n_slots=24, pi=1.0)
    out = generate_synthetic(cfg, seed=3)
    assert out["od"].data.sum() == 0.0


def test_sparsity_monotone_in_inflation():
    rates = []
    for pi in (0.2, 0.5, 0.8):
        cfg = SynthConfig(n_cells=24, n_communities=3, n_slots=48, pi=pi)
        rates.append(sparsity_rate(generate_synthetic(cfg, seed=7)["od"]))
    assert rates[0] < rates[1] < rates[2]


def test_seeded_generation_is_reproducible():
    cfg = SynthConfig(n_cells=20, n_communities=2, n_slots=24)
    a = generate_synthetic(cfg, seed=5)
    b = generate_synthetic(cfg, seed=5)
    assert np.array_equal(a["od"].data, b["od"].data)
    assert np.array_equal(a["poi"].data, b["poi"].data)
    c = generate_synthetic(cfg, seed=6)
    assert not np.array_equal(a["od"].data, c["od"].data)


def test_poisson_family_supported():
    cfg = SynthConfig(n_cells=20, n_communities=2, n_slots=24, family="poisson")
    out = generate_synthetic(cfg, seed=2)
    assert out["od"].data.max() > 0


def test_hub_flows_dominate_member_flows():
    cfg = SynthConfig(n_cells=40, n_communities=4, n_slots=96, pi=0.0)
    out = generate_synthetic(cfg, seed=4)
    labels = out["truth"].labels()
    od = out["od"].data.mean(axis=2)
    # one hub per community: the cell with the largest total flow
    totals = od.sum(axis=0) + od.sum(axis=1)
    hub_mask = np.zeros(40, dtype=bool)
    for c in range(4):
        members = np.nonzero(labels == c)[0]
        hub_mask[members[np.argmax(totals[members])]] = True
    hub_pairs = od[np.ix_(hub_mask, hub_mask)]
    np.fill_diagonal(hub_pairs, np.nan)
    member_pairs = od[np.ix_(~hub_mask, ~hub_mask)]
    np.fill_diagonal(member_pairs, np.nan)
    member_mean = np.nanmean(member_pairs[member_pairs > 0]) \
        if (member_pairs > 0).any() else 0.0
    assert np.nanmean(hub_pairs[hub_pairs > 0]) > 2.0 * member_mean


def test_cross_community_member_pairs_are_silent():
    cfg = SynthConfig(n_cells=30, n_communities=3, n_slots=48, pi=0.0)
    out = generate_synthetic(cfg, seed=8)
    labels = out["truth"].labels()
    od = out["od"].data.sum(axis=2)
    totals = od.sum(axis=0) + od.sum(axis=1)
    hubs = {np.nonzero(labels == c)[0][np.argmax(totals[labels == c])]
            for c in range(3)}
    for i in range(30):
        for j in range(30):
            if i in hubs or j in hubs or labels[i] == labels[j]:
                continue
            assert od[i, j] == 0.0


def test_config_validation():
    with pytest.raises(DataError):
        SynthConfig(n_cells=5, n_communities=9).validate()
    with pytest.raises(DataError):
        SynthConfig(pi=1.5).validate()
    with pytest.raises(DataError):
        SynthConfig(nb_dispersion=0.0).validate()
    with pytest.raises(DataError):
        SynthConfig(family="cauchy").validate()
