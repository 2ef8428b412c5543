"""Flow-aware space coarsening by label propagation.

The m highest-flow cells become super-cell seeds. Labels spread to the
remaining cells through a convex blend of a geographic transition matrix
(uniform over neighbors within a distance threshold) and a semantic one
(row-normalized mean OD exchange), with seed rows pinned to the identity
after every step. The converged soft labels are hardened row-wise into an
assignment.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb

from .data import (Assignment, CellGrid, DataError, ODTensor,
                   coarsen_tensor, pairwise_distances_km)


@dataclass(frozen=True)
class FlowStats:
    """Per-cell mean total flow f and the cell order by decreasing f."""

    f: np.ndarray
    order: np.ndarray  # permutation of 0..N-1, descending f, ties by lower index

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=np.float64))
        object.__setattr__(self, "order", np.asarray(self.order, dtype=np.int64))
        if self.f.ndim != 1 or self.order.shape != self.f.shape:
            raise DataError("flow stats and order must be 1-d and aligned")
        if sorted(self.order.tolist()) != list(range(self.f.size)):
            raise DataError("order must be a permutation of 0..N-1")


def compute_flow_stats(x: ODTensor) -> FlowStats:
    """f_i = mean over slots of (outgoing plus incoming flow of cell i)."""
    if x.n_slots == 0:
        raise DataError("empty tensor")
    per_slot = x.data.sum(axis=1) + x.data.sum(axis=0)  # (N, T)
    f = per_slot.mean(axis=1)
    order = np.argsort(-f, kind="stable")
    return FlowStats(f, order)


def select_dense(stats: FlowStats, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split cells into the m with largest f (dense) and the rest (sparse).

    Ties go to the lower cell index. Both index arrays come back sorted.
    """
    n = stats.f.size
    if not (1 <= m <= n):
        raise DataError(f"m must be in [1, {n}], got {m}")
    dense = np.sort(stats.order[:m])
    sparse = np.sort(stats.order[m:])
    return dense, sparse


def build_geo_transition(grid: CellGrid, l_km: float) -> np.ndarray:
    """Uniform transition over cells strictly within l_km, self excluded.

    A cell with no neighbor inside the threshold gets a self-loop so every
    row stays stochastic. Interior cells of a hexagonal grid with
    l_km slightly above twice the radius see exactly their six neighbors,
    giving rows with entries 1/6.
    """
    if l_km <= 0:
        raise DataError("distance threshold must be positive")
    dist = pairwise_distances_km(grid)
    near = dist < l_km
    np.fill_diagonal(near, False)
    t = near.astype(np.float64)
    counts = t.sum(axis=1)
    isolated = np.nonzero(counts == 0)[0]
    t[isolated, isolated] = 1.0
    counts[isolated] = 1.0
    return t / counts[:, None]


def build_sem_transition(x: ODTensor) -> np.ndarray:
    """Row-normalized symmetrized mean flow: W_ij = mean_t(x_ijt + x_jit), i != j.

    All-zero rows (cells with no observed exchange) get a self-loop.
    """
    w = x.data.mean(axis=2)
    w = w + w.T
    np.fill_diagonal(w, 0.0)
    sums = w.sum(axis=1)
    silent = sums == 0
    for i in np.nonzero(silent)[0]:
        w[i, i] = 1.0
        sums[i] = 1.0
    return w / sums[:, None]


@dataclass(frozen=True)
class LabelMatrix:
    """Soft (N, M) label scores; rows of propagated matrices are sub-stochastic."""

    y: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.y, dtype=np.float64)
        if a.ndim != 2:
            raise DataError("label matrix must be 2-d")
        if (a < 0).any() or not np.isfinite(a).all():
            raise DataError("label scores must be finite and non-negative")
        object.__setattr__(self, "y", a)


@dataclass(frozen=True)
class PropagationResult:
    labels: LabelMatrix
    n_iter: int
    converged: bool


def propagate(y0: np.ndarray, t_sem: np.ndarray, t_geo: np.ndarray,
              alpha: float = 0.5, beta: float = 0.5,
              tol: float = 1e-6, max_iter: int = 1000,
              callback=None) -> PropagationResult:
    """Iterate Y <- alpha*T_sem@Y + beta*T_geo@Y with the first M rows pinned.

    Rows 0..M-1 of y0 must be the identity (the dense seeds, in seed order);
    they are reset to the identity after every step. Stops when the max
    absolute change drops below tol, warning if max_iter is hit first.
    """
    if alpha < 0 or beta < 0 or abs(alpha + beta - 1.0) > 1e-12:
        raise DataError("alpha and beta must be non-negative and sum to 1")
    y = np.asarray(y0, dtype=np.float64).copy()
    n, m = y.shape
    if t_sem.shape != (n, n) or t_geo.shape != (n, n):
        raise DataError("transition matrices must be (N, N)")
    eye = np.eye(m)
    if not np.array_equal(y[:m], eye):
        raise DataError("first M rows of y0 must be the identity")
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        y_new = alpha * (t_sem @ y) + beta * (t_geo @ y)
        y_new[:m] = eye
        assert np.array_equal(y_new[:m], eye)
        delta = np.abs(y_new - y).max()
        y = y_new
        if callback is not None:
            callback(it, y)
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"label propagation did not converge in {max_iter} iterations",
                      RuntimeWarning)
    return PropagationResult(LabelMatrix(y), it, converged)


def assign(labels: LabelMatrix, fallback: np.ndarray | None = None,
           n_supercells: int | None = None) -> Assignment:
    """Harden soft labels row-wise: argmax with ties to the lowest column.

    Rows that are entirely zero (cells the propagation never reached) take
    fallback[i] when a fallback column array is given; otherwise the argmax
    convention already lands them on column 0.
    """
    y = labels.y
    cols = y.argmax(axis=1)
    if fallback is not None:
        dead = ~y.any(axis=1)
        cols = np.where(dead, np.asarray(fallback, dtype=np.int64), cols)
    return Assignment.from_labels(cols, n_supercells or y.shape[1])


@dataclass
class CoarseningParams:
    alpha: float = 0.5
    beta: float = 0.5
    tol: float = 1e-6
    max_iter: int = 1000
    l_km: float | None = None     # default: 2.1 * grid radius


@dataclass(frozen=True)
class CoarsenResult:
    assignment: Assignment
    x_s: ODTensor
    dense_cells: np.ndarray
    labels: LabelMatrix
    n_iter: int
    converged: bool


def coarsen(x: ODTensor, grid: CellGrid, m: int,
            params: CoarseningParams | None = None) -> CoarsenResult:
    """Full pipeline: flow stats, seed selection, propagation, assignment, contraction.

    Super-cell k corresponds to the k-th dense cell in increasing cell index.
    Unreached cells fall back to the geographically nearest dense cell.
    """
    params = params or CoarseningParams()
    if grid.n_cells != x.n_cells:
        raise DataError("grid and tensor disagree on the number of cells")
    l_km = params.l_km if params.l_km is not None else 2.1 * grid.radius_km

    stats = compute_flow_stats(x)
    dense, sparse = select_dense(stats, m)
    perm = np.concatenate([dense, sparse])

    t_sem = build_sem_transition(x)[np.ix_(perm, perm)]
    t_geo = build_geo_transition(grid, l_km)[np.ix_(perm, perm)]
    y0 = np.zeros((grid.n_cells, m))
    y0[:m] = np.eye(m)
    result = propagate(y0, t_sem, t_geo, params.alpha, params.beta,
                       params.tol, params.max_iter)

    dist = pairwise_distances_km(grid)
    nearest_dense = dist[np.ix_(perm, dense)].argmin(axis=1)
    a_perm = assign(result.labels, fallback=nearest_dense, n_supercells=m)

    a = np.zeros(a_perm.data.shape)
    a[perm] = a_perm.data
    assignment = Assignment(a)
    soft = np.zeros(result.labels.y.shape)
    soft[perm] = result.labels.y
    return CoarsenResult(assignment, coarsen_tensor(x, assignment), dense,
                         LabelMatrix(soft), result.n_iter, result.converged)


# ---------------------------------------------------------------------------
# Reference downsamplers used as comparison points for the learned coarsening.

def low_spatial_assignment(grid: CellGrid, l_km: float | None = None) -> Assignment:
    """Group each not-yet-grouped cell with its free neighbors (up to six).

    Greedy over cell index order, so a full hexagonal patch collapses a cell
    and its ring into one coarse cell of about seven members.
    """
    l_km = l_km if l_km is not None else 2.1 * grid.radius_km
    dist = pairwise_distances_km(grid)
    near = dist < l_km
    np.fill_diagonal(near, False)
    labels = np.full(grid.n_cells, -1, dtype=np.int64)
    group = 0
    for i in range(grid.n_cells):
        if labels[i] >= 0:
            continue
        labels[i] = group
        free = [j for j in np.nonzero(near[i])[0] if labels[j] < 0]
        for j in free[:6]:
            labels[j] = group
        group += 1
    return Assignment.from_labels(labels, group)


def downsample_low_spatial(x: ODTensor, grid: CellGrid,
                           l_km: float | None = None) -> ODTensor:
    """Aggregate flows through the neighbor-grouping assignment."""
    return coarsen_tensor(x, low_spatial_assignment(grid, l_km))


def downsample_mean_pool(x: ODTensor, patch: int = 4) -> ODTensor:
    """Mean-pool the OD matrix in non-overlapping patch x patch blocks.

    The spatial axes are zero-padded up to a multiple of the patch size, and
    each coarse entry is the mean of the patch**2 covered flows.
    """
    if patch < 1:
        raise DataError("patch size must be positive")
    n, t = x.n_cells, x.n_slots
    n_pad = -n % patch
    data = x.data
    if n_pad:
        data = np.pad(data, ((0, n_pad), (0, n_pad), (0, 0)))
    m = (n + n_pad) // patch
    pooled = data.reshape(m, patch, m, patch, t).mean(axis=(1, 3))
    return ODTensor(pooled, start_slot=x.start_slot, slot_duration=x.slot_duration)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two flat clusterings."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape or a.size == 0:
        raise DataError("label vectors must be non-empty and aligned")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    sum_cells = comb(table, 2).sum()
    sum_rows = comb(table.sum(axis=1), 2).sum()
    sum_cols = comb(table.sum(axis=0), 2).sum()
    total = comb(a.size, 2)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))
