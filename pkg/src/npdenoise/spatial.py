"""Uniform spatial grid for exact nearest-neighbour and radius queries."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geom import as_cloud

MAX_CELLS_PER_POINT = 8


@dataclass
class GridIndex:
    points: np.ndarray
    origin: np.ndarray
    cell: float
    dims: np.ndarray
    order: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return self.points.shape[0]


def build_grid(points, cell=None):
    """Bucket ``points`` into cubic cells of side ``cell``.

    The default cell targets about two points per occupied cell for a
    surface sample. The cell is grown if the grid would exceed
    ``MAX_CELLS_PER_POINT`` cells per point.
    """
    pts = np.ascontiguousarray(as_cloud(points))
    n = pts.shape[0]
    lo = pts.min(axis=0)
    extent = pts.max(axis=0) - lo
    span = float(extent.max())
    if cell is None:
        # surface samples: ~n/2 occupied cells of a 2D sheet
        cell = span / max(np.sqrt(n / 2.0), 1.0) if span > 0 else 1.0
    cell = float(cell) if cell > 0 else 1.0
    while True:
        dims = (np.floor(extent / cell).astype(np.int64) + 1)
        if int(np.prod(dims)) <= MAX_CELLS_PER_POINT * n + 27:
            break
        cell *= 1.5
    c = np.floor((pts - lo) / cell).astype(np.int64)
    c = np.minimum(np.maximum(c, 0), dims - 1)
    keys = c[:, 0] + dims[0] * (c[:, 1] + dims[1] * c[:, 2])
    order = np.argsort(keys, kind="stable").astype(np.int64)
    counts = np.bincount(keys, minlength=int(np.prod(dims)))
    starts = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return GridIndex(pts, lo, cell, dims, order, starts)


def knn_query(index, queries, k=1, backend=None):
    """Exact ``k`` nearest neighbours; ties go to the lower point index.

    Returns ``(indices, squared_distances)`` each ``(Q, k)``.
    """
    k_mod = backend or kernels.active
    q = np.ascontiguousarray(as_cloud(queries, "queries"))
    return k_mod.knn(index.points, index.order, index.starts, index.origin,
                     index.cell, index.dims, q, int(k))


def radius_query(index, queries, radius, max_k, backend=None):
    """Points within ``radius`` (inclusive), nearest ``max_k`` kept.

    Returns CSR ``(offsets, indices, squared_distances)``.
    """
    k_mod = backend or kernels.active
    q = np.ascontiguousarray(as_cloud(queries, "queries"))
    return k_mod.radius(index.points, index.order, index.starts, index.origin,
                        index.cell, index.dims, q, float(radius), int(max_k))


def nn_index_build(cloud):
    return build_grid(cloud)


def nn_query(index, p):
    """Nearest stored point to ``p``: ``(index, squared_distance)``."""
    idx, d2 = knn_query(index, np.asarray(p, dtype=np.float64).reshape(1, 3), 1)
    return int(idx[0, 0]), float(d2[0, 0])
