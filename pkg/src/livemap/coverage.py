"""Coverage-disk geometry, overlap graph and coverage-constrained scheduling.

Areas are measured by rasterising disks onto a regular grid anchored at the
lower-left corner of the disks' joint bounding box; a cell counts as covered
when its centre lies inside a disk.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._accel import dispatch, njit

SCHEDULE_CELL = 2.0
METRIC_CELL = 5.0
_TIE_TOL = 1e-12


@dataclass(frozen=True)
class CoverageDisk:
    vehicle_id: int
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"coverage radius must be positive, got {self.radius}")


@dataclass
class CoverageGraph:
    vertices: list
    edges: np.ndarray


@dataclass
class ScheduleResult:
    scheduled: np.ndarray
    achieved_fraction: float


# --------------------------------------------------------------------------- grid


class _Grid:
    """Cell layout covering a set of disks."""

    def __init__(self, cx, cy, r, cell):
        if not cell > 0:
            raise ValueError(f"cell size must be positive, got {cell}")
        self.cell = float(cell)
        self.x0 = float(np.min(cx - r))
        self.y0 = float(np.min(cy - r))
        self.nx = max(1, int(np.ceil((np.max(cx + r) - self.x0) / cell)))
        self.ny = max(1, int(np.ceil((np.max(cy + r) - self.y0) / cell)))


def _as_arrays(disks):
    cx = np.array([d.center[0] for d in disks], dtype=np.float64)
    cy = np.array([d.center[1] for d in disks], dtype=np.float64)
    r = np.array([d.radius for d in disks], dtype=np.float64)
    return cx, cy, r


@njit
def _disk_span(c, r, lo, cell, n):
    # index range of cell centres lo + (i + .5) * cell within [c - r, c + r]
    i0 = int(np.ceil((c - r - lo) / cell - 0.5))
    i1 = int(np.floor((c + r - lo) / cell - 0.5))
    if i0 < 0:
        i0 = 0
    if i1 > n - 1:
        i1 = n - 1
    return i0, i1


@njit
def _raster_counts_nb(cx, cy, r, active, x0, y0, cell, nx, ny):
    counts = np.zeros((ny, nx), dtype=np.int32)
    for k in range(cx.shape[0]):
        if not active[k]:
            continue
        ix0, ix1 = _disk_span(cx[k], r[k], x0, cell, nx)
        iy0, iy1 = _disk_span(cy[k], r[k], y0, cell, ny)
        r2 = r[k] * r[k]
        for iy in range(iy0, iy1 + 1):
            dy = y0 + (iy + 0.5) * cell - cy[k]
            for ix in range(ix0, ix1 + 1):
                dx = x0 + (ix + 0.5) * cell - cx[k]
                if dx * dx + dy * dy <= r2:
                    counts[iy, ix] += 1
    return counts


def _disk_masks_np(cx, cy, r, x0, y0, cell, nx, ny):
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    dx2 = (xs[None, :] - cx[:, None]) ** 2
    dy2 = (ys[None, :] - cy[:, None]) ** 2
    return dy2[:, :, None] + dx2[:, None, :] <= (r * r)[:, None, None]


def _raster_counts_np(cx, cy, r, active, x0, y0, cell, nx, ny):
    if not np.any(active):
        return np.zeros((ny, nx), dtype=np.int32)
    masks = _disk_masks_np(cx[active], cy[active], r[active], x0, y0, cell, nx, ny)
    return masks.sum(axis=0, dtype=np.int32)


_raster_counts = dispatch(_raster_counts_nb, _raster_counts_np)


@njit
def _pair_cells_nb(cx, cy, r, x0, y0, cell, nx, ny):
    """Per-disk cell counts (diagonal) and pairwise intersection cell counts."""
    n = cx.shape[0]
    inter = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        ix0, ix1 = _disk_span(cx[i], r[i], x0, cell, nx)
        iy0, iy1 = _disk_span(cy[i], r[i], y0, cell, ny)
        ri2 = r[i] * r[i]
        for j in range(i, n):
            ddx = cx[i] - cx[j]
            ddy = cy[i] - cy[j]
            reach = r[i] + r[j]
            if ddx * ddx + ddy * ddy > reach * reach:
                continue
            jx0, jx1 = _disk_span(cx[j], r[j], x0, cell, nx)
            jy0, jy1 = _disk_span(cy[j], r[j], y0, cell, ny)
            rj2 = r[j] * r[j]
            c = 0
            for iy in range(max(iy0, jy0), min(iy1, jy1) + 1):
                yc = y0 + (iy + 0.5) * cell
                dyi = yc - cy[i]
                dyj = yc - cy[j]
                for ix in range(max(ix0, jx0), min(ix1, jx1) + 1):
                    xc = x0 + (ix + 0.5) * cell
                    dxi = xc - cx[i]
                    dxj = xc - cx[j]
                    if dxi * dxi + dyi * dyi <= ri2 and dxj * dxj + dyj * dyj <= rj2:
                        c += 1
            inter[i, j] = c
            inter[j, i] = c
    return inter


def _pair_cells_np(cx, cy, r, x0, y0, cell, nx, ny):
    masks = _disk_masks_np(cx, cy, r, x0, y0, cell, nx, ny).reshape(len(cx), -1)
    # float32 matmul is exact for counts below 2**24
    m = masks.astype(np.float32)
    return np.rint(m @ m.T).astype(np.int64)


_pair_cells = dispatch(_pair_cells_nb, _pair_cells_np)


@njit
def _exclusive_cells_nb(counts, cx, cy, r, x0, y0, cell, k):
    ny, nx = counts.shape
    ix0, ix1 = _disk_span(cx[k], r[k], x0, cell, nx)
    iy0, iy1 = _disk_span(cy[k], r[k], y0, cell, ny)
    r2 = r[k] * r[k]
    lost = 0
    for iy in range(iy0, iy1 + 1):
        dy = y0 + (iy + 0.5) * cell - cy[k]
        for ix in range(ix0, ix1 + 1):
            dx = x0 + (ix + 0.5) * cell - cx[k]
            if dx * dx + dy * dy <= r2 and counts[iy, ix] == 1:
                lost += 1
    return lost


@njit
def _remove_disk_nb(counts, cx, cy, r, x0, y0, cell, k):
    ny, nx = counts.shape
    ix0, ix1 = _disk_span(cx[k], r[k], x0, cell, nx)
    iy0, iy1 = _disk_span(cy[k], r[k], y0, cell, ny)
    r2 = r[k] * r[k]
    for iy in range(iy0, iy1 + 1):
        dy = y0 + (iy + 0.5) * cell - cy[k]
        for ix in range(ix0, ix1 + 1):
            dx = x0 + (ix + 0.5) * cell - cx[k]
            if dx * dx + dy * dy <= r2:
                counts[iy, ix] -= 1


def _single_mask_np(cx, cy, r, x0, y0, cell, k, shape):
    ny, nx = shape
    return _disk_masks_np(cx[k:k + 1], cy[k:k + 1], r[k:k + 1], x0, y0, cell, nx, ny)[0]


def _exclusive_cells_np(counts, cx, cy, r, x0, y0, cell, k):
    mask = _single_mask_np(cx, cy, r, x0, y0, cell, k, counts.shape)
    return int(np.count_nonzero(mask & (counts == 1)))


def _remove_disk_np(counts, cx, cy, r, x0, y0, cell, k):
    counts -= _single_mask_np(cx, cy, r, x0, y0, cell, k, counts.shape).astype(np.int32)


_exclusive_cells = dispatch(_exclusive_cells_nb, _exclusive_cells_np)
_remove_disk = dispatch(_remove_disk_nb, _remove_disk_np)


# --------------------------------------------------------------------------- public API


def union_area(disks: Sequence[CoverageDisk], cell: float = SCHEDULE_CELL) -> float:
    """Area of the union of ``disks`` in square metres (grid estimate)."""
    if len(disks) == 0:
        return 0.0
    cx, cy, r = _as_arrays(disks)
    return union_area_arrays(cx, cy, r, cell)


def union_area_arrays(cx, cy, r, cell=METRIC_CELL, active=None):
    """Array form of :func:`union_area`; ``active`` masks which disks count.

    The grid always spans every disk so that the result for a subset is
    comparable with the result for the full set.
    """
    if len(cx) == 0:
        return 0.0
    grid = _Grid(cx, cy, r, cell)
    if active is None:
        active = np.ones(len(cx), dtype=np.bool_)
    counts = _raster_counts(cx, cy, r, np.asarray(active, dtype=np.bool_),
                            grid.x0, grid.y0, grid.cell, grid.nx, grid.ny)
    return float(np.count_nonzero(counts)) * grid.cell ** 2


def coverage_fraction(cx, cy, r, active, cell=METRIC_CELL):
    """Union of the active disks divided by the union of all disks."""
    if len(cx) == 0:
        return 1.0
    grid = _Grid(cx, cy, r, cell)
    everyone = np.ones(len(cx), dtype=np.bool_)
    full = _raster_counts(cx, cy, r, everyone, grid.x0, grid.y0, grid.cell, grid.nx, grid.ny)
    part = _raster_counts(cx, cy, r, np.asarray(active, dtype=np.bool_),
                          grid.x0, grid.y0, grid.cell, grid.nx, grid.ny)
    return np.count_nonzero(part) / np.count_nonzero(full)


def overlap_ratio(a: CoverageDisk, b: CoverageDisk, cell: float = SCHEDULE_CELL) -> float:
    """Jaccard ratio |a ∩ b| / |a ∪ b| of two disks (grid estimate)."""
    cx, cy, r = _as_arrays([a, b])
    grid = _Grid(cx, cy, r, cell)
    inter = _pair_cells(cx, cy, r, grid.x0, grid.y0, grid.cell, grid.nx, grid.ny)
    union = inter[0, 0] + inter[1, 1] - inter[0, 1]
    return float(inter[0, 1] / union) if union else 0.0


def lens_overlap_ratio(r: float, d: float) -> float:
    """Closed-form Jaccard ratio of two radius-``r`` disks whose centres are ``d`` apart."""
    if d >= 2 * r:
        return 0.0
    lens = 2 * r * r * np.arccos(d / (2 * r)) - 0.5 * d * np.sqrt(4 * r * r - d * d)
    return float(lens / (2 * np.pi * r * r - lens))


def _jaccard(inter):
    area = np.diag(inter).astype(np.float64)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        e = np.where(union > 0, inter / union, 0.0)
    np.fill_diagonal(e, 0.0)
    return e


def build_graph(disks: Sequence[CoverageDisk], cell: float = SCHEDULE_CELL) -> CoverageGraph:
    """Complete overlap graph with Jaccard edge weights."""
    disks = list(disks)
    if not disks:
        return CoverageGraph([], np.zeros((0, 0)))
    cx, cy, r = _as_arrays(disks)
    grid = _Grid(cx, cy, r, cell)
    inter = _pair_cells(cx, cy, r, grid.x0, grid.y0, grid.cell, grid.nx, grid.ny)
    return CoverageGraph(disks, _jaccard(inter))


def aor(graph: CoverageGraph, i: int, active) -> float:
    """Average overlapping ratio of vertex ``i`` against the other active vertices.

    The sum is divided by the total vertex count, not by the active count.
    """
    active = np.asarray(active, dtype=bool)
    if not active[i]:
        raise ValueError(f"vertex {i} is not active")
    n = len(graph.vertices)
    mask = active.copy()
    mask[i] = False
    return float(graph.edges[i, mask].sum() / n)


def schedule(disks: Sequence[CoverageDisk], beta: float, cell: float = SCHEDULE_CELL) -> ScheduleResult:
    """Greedy coverage-constrained pruning.

    Starting from every vehicle scheduled, the active vertex with the highest
    AoR (recomputed over the remaining active set) is removed until a removal
    would push the active union below ``beta`` times the full union; that
    removal is undone and the loop stops. The last active vertex is never
    removed.
    """
    disks = list(disks)
    cx, cy, r = _as_arrays(disks) if disks else (np.zeros(0),) * 3
    ids = np.array([d.vehicle_id for d in disks], dtype=np.int64)
    return schedule_arrays(ids, cx, cy, r, beta, cell)


def schedule_arrays(ids, cx, cy, r, beta, cell=SCHEDULE_CELL):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    n = len(cx)
    if n == 0:
        return ScheduleResult(np.zeros(0, dtype=bool), 1.0)
    cx = np.ascontiguousarray(cx, dtype=np.float64)
    cy = np.ascontiguousarray(cy, dtype=np.float64)
    r = np.ascontiguousarray(r, dtype=np.float64)
    ids = np.asarray(ids)
    grid = _Grid(cx, cy, r, cell)
    args = (grid.x0, grid.y0, grid.cell)
    active = np.ones(n, dtype=np.bool_)
    counts = _raster_counts(cx, cy, r, active, *args, grid.nx, grid.ny)
    full = int(np.count_nonzero(counts))
    edges = _jaccard(_pair_cells(cx, cy, r, *args, grid.nx, grid.ny))
    covered = full
    while active.sum() > 1:
        scores = np.where(active, edges[:, active].sum(axis=1) / n, -np.inf)
        top = scores.max()
        tied = np.flatnonzero(scores >= top - _TIE_TOL)
        k = int(tied[np.argmin(ids[tied])])
        remaining = covered - _exclusive_cells(counts, cx, cy, r, *args, k)
        if remaining < beta * full:
            break
        _remove_disk(counts, cx, cy, r, *args, k)
        active[k] = False
        covered = remaining
    return ScheduleResult(active, covered / full)


def next_removal_violates(ids, cx, cy, r, active, beta, cell=SCHEDULE_CELL):
    """Whether pruning the highest-AoR active vertex would break the coverage bound.

    Independent re-evaluation used to audit a finished schedule.
    """
    active = np.asarray(active, dtype=bool)
    if active.sum() <= 1:
        return True
    graph_edges = build_graph(
        [CoverageDisk(int(i), (x, y), rr) for i, x, y, rr in zip(ids, cx, cy, r)], cell).edges
    n = len(cx)
    scores = np.where(active, graph_edges[:, active].sum(axis=1) / n, -np.inf)
    tied = np.flatnonzero(scores >= scores.max() - _TIE_TOL)
    k = int(tied[np.argmin(np.asarray(ids)[tied])])
    trial = active.copy()
    trial[k] = False
    full = union_area_arrays(cx, cy, r, cell)
    return union_area_arrays(cx, cy, r, cell, active=trial) < beta * full
