"""Core origin-destination data types, tensor operations, and CSV serialization.

An OD tensor stores trip counts indexed by (origin cell, destination cell,
time slot). Cells live on a hexagonal grid given by center coordinates in
degrees and a shared radius in kilometers. Assignments map cells to
super-cells and drive the coarsening contraction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0088


class DataError(ValueError):
    """Malformed or inconsistent input data (bad CSV row, index out of range)."""


class NumericalError(RuntimeError):
    """A computation produced NaN or diverged."""


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CellGrid:
    """Hexagonal cells: center longitude/latitude in degrees, common radius in km.

    Cell ids are implicit positions 0..N-1. The radius is the hexagon inradius,
    so adjacent cell centers sit 2*radius_km apart.
    """

    lon: np.ndarray
    lat: np.ndarray
    radius_km: float

    def __post_init__(self):
        lon = np.asarray(self.lon, dtype=np.float64).ravel()
        lat = np.asarray(self.lat, dtype=np.float64).ravel()
        if lon.shape != lat.shape:
            raise DataError("lon and lat must have the same length")
        if lon.size == 0:
            raise DataError("grid must contain at least one cell")
        if not (np.isfinite(lon).all() and np.isfinite(lat).all()):
            raise DataError("grid coordinates must be finite")
        if np.abs(lon).max() > 180.0 or np.abs(lat).max() > 90.0:
            raise DataError("coordinates must satisfy |lon| <= 180, |lat| <= 90")
        if not self.radius_km > 0:
            raise DataError("cell radius must be positive")
        pts = np.stack([lon, lat], axis=1)
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise DataError("two cells share identical coordinates")
        object.__setattr__(self, "lon", _frozen(lon))
        object.__setattr__(self, "lat", _frozen(lat))

    @property
    def n_cells(self) -> int:
        return self.lon.size


def great_circle_km(lon1, lat1, lon2, lat2) -> np.ndarray:
    """Haversine distance in kilometers between points given in degrees."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64))
                              for v in (lon1, lat1, lon2, lat2))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_distances_km(grid: CellGrid) -> np.ndarray:
    """Dense N x N great-circle distance matrix between cell centers."""
    return great_circle_km(grid.lon[:, None], grid.lat[:, None],
                           grid.lon[None, :], grid.lat[None, :])


@dataclass(frozen=True)
class ODTensor:
    """Dense (N, N, T) array of trip counts plus slot metadata.

    data[i, j, t] is the demand from cell i to cell j during slot t. Entries
    are non-negative reals (counts in raw data, expected counts in forecasts).
    Instances are immutable; the backing array is write-protected.
    """

    data: np.ndarray
    start_slot: int = 0
    slot_duration: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or a.shape[0] != a.shape[1]:
            raise DataError(f"OD tensor must be (N, N, T), got {a.shape}")
        if a.size == 0:
            raise DataError("empty tensor")
        if not np.isfinite(a).all():
            raise DataError("OD tensor contains non-finite entries")
        if (a < 0).any():
            raise DataError("OD tensor contains negative entries")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def n_cells(self) -> int:
        return self.data.shape[0]

    @property
    def n_slots(self) -> int:
        return self.data.shape[2]

    def window(self, t0: int, t1: int) -> "ODTensor":
        """Slots [t0, t1) as a new tensor; start_slot shifts accordingly."""
        if not (0 <= t0 < t1 <= self.n_slots):
            raise DataError(f"slot window [{t0}, {t1}) out of range for T={self.n_slots}")
        return ODTensor(self.data[:, :, t0:t1].copy(),
                        start_slot=self.start_slot + t0,
                        slot_duration=self.slot_duration)


@dataclass(frozen=True)
class POIMatrix:
    """Binary region-by-category matrix of points-of-interest presence."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise DataError(f"POI matrix must be 2-d, got shape {a.shape}")
        if not np.isin(a, (0.0, 1.0)).all():
            raise DataError("POI matrix entries must be 0 or 1")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def n_regions(self) -> int:
        return self.data.shape[0]

    @property
    def n_categories(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Assignment:
    """Binary (N, M) cell-to-super-cell map: one 1 per row, no empty columns."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise DataError(f"assignment must be 2-d, got shape {a.shape}")
        if not np.isin(a, (0.0, 1.0)).all():
            raise DataError("assignment entries must be 0 or 1")
        if not (a.sum(axis=1) == 1.0).all():
            raise DataError("every cell must map to exactly one super-cell")
        if (a.sum(axis=0) == 0.0).any():
            raise DataError("assignment has empty super-cells")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def n_cells(self) -> int:
        return self.data.shape[0]

    @property
    def n_supercells(self) -> int:
        return self.data.shape[1]

    def labels(self) -> np.ndarray:
        """Per-cell super-cell index, shape (N,)."""
        return self.data.argmax(axis=1)

    @classmethod
    def from_labels(cls, labels, n_supercells: int | None = None) -> "Assignment":
        labels = np.asarray(labels, dtype=np.int64).ravel()
        m = int(labels.max()) + 1 if n_supercells is None else int(n_supercells)
        a = np.zeros((labels.size, m))
        a[np.arange(labels.size), labels] = 1.0
        return cls(a)


def sparsity_rate(x: ODTensor) -> float:
    """Fraction of exactly-zero entries over all N*N*T cells."""
    if x.data.size == 0:
        raise DataError("empty tensor")
    return float(np.count_nonzero(x.data == 0.0)) / float(x.data.size)


def mode_product(x, y, mode: int) -> np.ndarray:
    """Contract spatial mode 1 or 2 of x against the columns of y.

    With x of shape (N, N, T) and y of shape (N, M), mode 1 yields
    out[a, j, t] = sum_i x[i, j, t] * y[i, a] with shape (M, N, T); mode 2
    contracts the destination axis the same way, yielding (N, M, T). Returns
    a plain array because the intermediate is rectangular.
    """
    xd = x.data if isinstance(x, ODTensor) else np.asarray(x, dtype=np.float64)
    yd = y.data if isinstance(y, Assignment) else np.asarray(y, dtype=np.float64)
    if xd.ndim != 3:
        raise DataError(f"mode_product expects a 3-d tensor, got shape {xd.shape}")
    if mode not in (1, 2):
        raise DataError(f"mode must be 1 or 2, got {mode}")
    if yd.shape[0] != xd.shape[mode - 1]:
        raise DataError(f"cannot contract axis of length {xd.shape[mode - 1]} "
                        f"with matrix of {yd.shape[0]} rows")
    if mode == 1:
        return np.einsum("ijt,ia->ajt", xd, yd)
    return np.einsum("ijt,ja->iat", xd, yd)


def coarsen_tensor(x: ODTensor, y: Assignment) -> ODTensor:
    """Aggregate both spatial modes through an assignment: (N,N,T) -> (M,M,T).

    Elementwise: out[a, b, t] = sum_{i,j} x[i, j, t] * y[i, a] * y[j, b].
    Column-stochastic-free: a binary one-per-row assignment makes this a plain
    sum over member cells, so total demand per slot is preserved.
    """
    coarse = mode_product(mode_product(x, y, 1), y, 2)
    return ODTensor(coarse, start_slot=x.start_slot, slot_duration=x.slot_duration)


def aggregate_poi(poi: POIMatrix, assignment: Assignment) -> POIMatrix:
    """Collapse a cell-level POI matrix to super-cells by boolean OR."""
    if poi.n_regions != assignment.n_cells:
        raise DataError("POI rows do not match assignment rows")
    merged = assignment.data.T @ poi.data
    return POIMatrix((merged > 0).astype(np.float64))


# ---------------------------------------------------------------------------
# CSV serialization. All files are UTF-8 with LF newlines and a header row.

def _format_count(v: float) -> str:
    if v == int(v):
        return str(int(v))
    return repr(float(v))


def save_od_csv(x: ODTensor, path) -> None:
    """Write non-zero entries as origin,destination,slot,count triples."""
    path = Path(path)
    ii, jj, tt = np.nonzero(x.data)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("origin,destination,slot,count\n")
        for i, j, t in zip(ii.tolist(), jj.tolist(), tt.tolist()):
            fh.write(f"{i},{j},{t},{_format_count(x.data[i, j, t])}\n")


def load_od_csv(path, grid: CellGrid | int, n_slots: int | None = None) -> ODTensor:
    """Read origin,destination,slot,count triples into a dense tensor.

    Absent triples are zero; duplicate triples are summed. `grid` may be a
    CellGrid or the cell count. When n_slots is omitted the slot axis is sized
    by the largest slot index seen.
    """
    path = Path(path)
    n = grid.n_cells if isinstance(grid, CellGrid) else int(grid)
    rows = []
    max_slot = -1
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["origin", "destination", "slot", "count"]:
            raise DataError(f"{path}: expected header origin,destination,slot,count")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                i, j, t = int(row[0]), int(row[1]), int(row[2])
                c = float(row[3])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if not (0 <= i < n and 0 <= j < n):
                raise DataError(f"{path}: line {lineno}: cell index out of range [0, {n})")
            if t < 0 or (n_slots is not None and t >= n_slots):
                raise DataError(f"{path}: line {lineno}: slot index {t} out of range")
            if c < 0 or not np.isfinite(c):
                raise DataError(f"{path}: line {lineno}: invalid count {row[3]}")
            rows.append((i, j, t, c))
            max_slot = max(max_slot, t)
    t_total = n_slots if n_slots is not None else max_slot + 1
    if t_total <= 0:
        raise DataError(f"{path}: no slots (empty file and n_slots not given)")
    data = np.zeros((n, n, t_total))
    for i, j, t, c in rows:
        data[i, j, t] += c
    return ODTensor(data)


def save_grid_csv(grid: CellGrid, path) -> None:
    """Write the radius line followed by id,lon,lat rows."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"radius_km,{float(grid.radius_km)!r}\n")
        fh.write("id,lon,lat\n")
        for k in range(grid.n_cells):
            fh.write(f"{k},{float(grid.lon[k])!r},{float(grid.lat[k])!r}\n")


def load_grid_csv(path) -> CellGrid:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or len(first) != 2 or first[0].strip() != "radius_km":
            raise DataError(f"{path}: first line must be radius_km,<value>")
        try:
            radius = float(first[1])
        except ValueError:
            raise DataError(f"{path}: invalid radius {first[1]!r}") from None
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["id", "lon", "lat"]:
            raise DataError(f"{path}: expected header id,lon,lat")
        ids, lons, lats = [], [], []
        for lineno, row in enumerate(reader, start=3):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 fields")
            try:
                ids.append(int(row[0]))
                lons.append(float(row[1]))
                lats.append(float(row[2]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if sorted(ids) != list(range(len(ids))):
        raise DataError(f"{path}: cell ids must be exactly 0..{len(ids) - 1}")
    order = np.argsort(ids)
    return CellGrid(np.asarray(lons)[order], np.asarray(lats)[order], radius)


def save_assignment_csv(assignment: Assignment, path) -> None:
    path = Path(path)
    labels = assignment.labels()
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("cell_id,supercell_id\n")
        for i, m in enumerate(labels.tolist()):
            fh.write(f"{i},{m}\n")


def load_assignment_csv(path, n_supercells: int | None = None) -> Assignment:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["cell_id", "supercell_id"]:
            raise DataError(f"{path}: expected header cell_id,supercell_id")
        pairs = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 fields")
            try:
                cell, sc = int(row[0]), int(row[1])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if cell in pairs:
                raise DataError(f"{path}: line {lineno}: duplicate cell id {cell}")
            pairs[cell] = sc
    if sorted(pairs) != list(range(len(pairs))):
        raise DataError(f"{path}: cell ids must be exactly 0..{len(pairs) - 1}")
    labels = np.array([pairs[i] for i in range(len(pairs))])
    if labels.min() < 0:
        raise DataError(f"{path}: negative super-cell id")
    return Assignment.from_labels(labels, n_supercells)


def save_poi_csv(poi: POIMatrix, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        cols = ",".join(f"c{k}" for k in range(poi.n_categories))
        fh.write(f"region,{cols}\n")
        for r in range(poi.n_regions):
            vals = ",".join(str(int(v)) for v in poi.data[r])
            fh.write(f"{r},{vals}\n")


def load_poi_csv(path) -> POIMatrix:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "region":
            raise DataError(f"{path}: expected header region,c0,...")
        p = len(header) - 1
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != p + 1:
                raise DataError(f"{path}: line {lineno}: expected {p + 1} fields")
            try:
                rows.append((int(row[0]), [float(v) for v in row[1:]]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if sorted(r for r, _ in rows) != list(range(len(rows))):
        raise DataError(f"{path}: region ids must be exactly 0..{len(rows) - 1}")
    data = np.zeros((len(rows), p))
    for r, vals in rows:
        data[r] = vals
    return POIMatrix(data)
