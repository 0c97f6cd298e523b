"""Reference planes for clean clouds by Gaussian-weighted local PCA.

For each point ``i`` the neighbourhood is every point within radius ``eps``
(the point itself included), capped at the ``max_k`` nearest. Weights are
``exp(-d^2 / (2 sigma_w^2))`` normalized to sum to one. The normal is the
eigenvector of the smallest eigenvalue of the weighted covariance and the
intercept is ``normal . weighted_mean``.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels, spatial
from .errors import DegenerateFitError, UsageError
from .geom import PlaneSet, Plane, as_cloud

log = logging.getLogger(__name__)

MIN_NEIGHBORS = 3
SIGN_TOL = 1e-9
TIE_TOL = 1e-9
RANK_TOL = 1e-10


@dataclass
class PlaneFitParams:
    """Neighbourhood parameters. ``None`` means derive from the cloud.

    ``eps`` defaults to ``eps_scale`` times the median nearest-neighbour
    distance and ``sigma_w`` to ``eps / 2``.
    """

    eps: float | None = None
    sigma_w: float | None = None
    max_k: int = 30
    eps_scale: float = 4.0

    def resolve(self, cloud):
        pts = as_cloud(cloud)
        eps = self.eps
        if eps is None:
            eps = self.eps_scale * median_nn_distance(pts)
        sigma_w = self.sigma_w if self.sigma_w is not None else eps / 2.0
        if not eps > 0 or not sigma_w > 0:
            raise UsageError(f"plane-fit radius and bandwidth must be positive (eps={eps}, sigma_w={sigma_w})")
        if self.max_k < MIN_NEIGHBORS:
            raise UsageError(f"max_k must be at least {MIN_NEIGHBORS}")
        return PlaneFitParams(eps=float(eps), sigma_w=float(sigma_w), max_k=int(self.max_k), eps_scale=self.eps_scale)

    def to_dict(self):
        return asdict(self)


@dataclass
class NeighborGraph:
    """CSR neighbour lists: point ``i`` owns ``indices[offsets[i]:offsets[i+1]]``."""

    offsets: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    sqdist: np.ndarray
    params: PlaneFitParams
    expanded: list = field(default_factory=list)

    def __len__(self):
        return self.offsets.size - 1

    def neighbors(self, i):
        s, e = self.offsets[i], self.offsets[i + 1]
        return list(zip(self.indices[s:e].tolist(), self.weights[s:e].tolist()))

    @property
    def owner(self):
        return np.repeat(np.arange(len(self)), np.diff(self.offsets))


def median_nn_distance(cloud):
    pts = as_cloud(cloud)
    if pts.shape[0] < 2:
        return 0.0
    grid = spatial.build_grid(pts)
    _, d2 = spatial.knn_query(grid, pts, 2)
    return float(np.median(np.sqrt(d2[:, 1])))


def build_neighbor_graph(cloud, params=None):
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if n < 4:
        raise UsageError(f"plane fitting needs at least 4 points, got {n}")
    params = (params or PlaneFitParams()).resolve(pts)
    grid = spatial.build_grid(pts, cell=params.eps if np.isfinite(params.eps) else None)
    offsets, idx, d2 = spatial.radius_query(grid, pts, params.eps, params.max_k)
    counts = np.diff(offsets)
    short = np.flatnonzero(counts < MIN_NEIGHBORS)
    if short.size:
        log.warning("%d points had fewer than %d neighbours; using their %d nearest",
                    short.size, MIN_NEIGHBORS, MIN_NEIGHBORS)
        k_idx, k_d2 = spatial.knn_query(grid, pts[short], MIN_NEIGHBORS)
        parts_i, parts_d, new_counts = [], [], counts.copy()
        fill = dict(zip(short.tolist(), range(short.size)))
        for i in range(n):
            if i in fill:
                r = fill[i]
                parts_i.append(k_idx[r])
                parts_d.append(k_d2[r])
                new_counts[i] = MIN_NEIGHBORS
            else:
                parts_i.append(idx[offsets[i]:offsets[i + 1]])
                parts_d.append(d2[offsets[i]:offsets[i + 1]])
        idx = np.concatenate(parts_i)
        d2 = np.concatenate(parts_d)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(new_counts, out=offsets[1:])
    raw = np.exp(-d2 / (2.0 * params.sigma_w ** 2))
    owner = np.repeat(np.arange(n), np.diff(offsets))
    z = np.bincount(owner, weights=raw, minlength=n)
    weights = raw / z[owner]
    return NeighborGraph(offsets, idx, weights, d2, params, short.tolist())


def _all_moments(pts, graph):
    """Weighted means ``(N, 3)`` and covariances ``(N, 3, 3)`` for every point."""
    owner = graph.owner
    n = len(graph)
    nb = pts[graph.indices]
    w = graph.weights
    mean = np.stack([np.bincount(owner, weights=w * nb[:, a], minlength=n) for a in range(3)], axis=1)
    diff = nb - mean[owner]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = np.bincount(owner, weights=w * diff[:, a] * diff[:, b], minlength=n)
            cov[:, b, a] = cov[:, a, b]
    return mean, cov


@dataclass
class WeightedCovariance:
    matrix: np.ndarray
    mean: np.ndarray


def weighted_covariance(cloud, graph, i):
    pts = as_cloud(cloud)
    s, e = graph.offsets[i], graph.offsets[i + 1]
    nb = pts[graph.indices[s:e]]
    w = graph.weights[s:e]
    mean = w @ nb
    diff = nb - mean
    m = (diff * w[:, None]).T @ diff
    m = (m + m.T) / 2.0
    return WeightedCovariance(m, mean)


def _canonical_sign(v):
    """+1 or -1 so that the first component beyond ``SIGN_TOL`` is positive."""
    for x in v:
        if abs(x) > SIGN_TOL:
            return 1.0 if x > 0 else -1.0
    return 1.0


def _order_eigenpairs(w, vecs):
    """Sort ascending, fix signs, break ties lexicographically."""
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
    scale = np.maximum(np.abs(w).max(axis=1), np.finfo(float).tiny)
    ties = np.diff(w, axis=1) <= TIE_TOL * scale[:, None]
    for i in range(w.shape[0]):
        cols = [vecs[i, :, k] * _canonical_sign(vecs[i, :, k]) for k in range(3)]
        if ties[i].any():
            k = 0
            while k < 3:
                j = k
                while j < 2 and ties[i, j]:
                    j += 1
                if j > k:
                    group = sorted(cols[k:j + 1], key=lambda v: tuple(np.round(v, 12)))
                    cols[k:j + 1] = group
                k = j + 1
        vecs[i] = np.stack(cols, axis=1)
    return w, vecs


def eig_sym3(m):
    """Eigenpairs of a symmetric 3x3 matrix, eigenvalues ascending.

    Returns ``[(value, unit_vector), ...]``. Each vector is signed so its
    first significant component is positive; within a repeated eigenvalue
    the vectors are ordered lexicographically.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise UsageError(f"expected a 3x3 matrix, got {m.shape}")
    if np.abs(m - m.T).max() > 1e-9:
        raise UsageError("matrix is not symmetric")
    sym = (m + m.T) / 2.0
    w, vecs = kernels.active.eig3(sym[None])
    w, vecs = _order_eigenpairs(w, vecs)
    return [(float(w[0, k]), vecs[0, :, k].copy()) for k in range(3)]


def _is_rank_deficient(vals):
    top = vals[..., 2]
    return (vals[..., 1] <= RANK_TOL * top) | (top <= np.finfo(float).tiny)


def fit_plane(cloud, graph, i):
    cov = weighted_covariance(cloud, graph, i)
    vals = eig_sym3(cov.matrix)
    if _is_rank_deficient(np.array([v for v, _ in vals])):
        raise DegenerateFitError(i)
    normal = vals[0][1]
    return Plane(normal, float(normal @ cov.mean))


def canonicalize_orientation(planes, cloud):
    pts = as_cloud(cloud)
    if len(planes) != pts.shape[0]:
        raise UsageError(f"{len(planes)} planes for {pts.shape[0]} points")
    n = planes.normals
    signs = np.ones(n.shape[0])
    decided = np.zeros(n.shape[0], dtype=bool)
    for a in range(3):
        hit = ~decided & (np.abs(n[:, a]) > SIGN_TOL)
        signs[hit] = np.where(n[hit, a] > 0, 1.0, -1.0)
        decided |= hit
    return PlaneSet(n * signs[:, None], planes.intercepts * signs)


@dataclass
class FitReport:
    params: dict
    n_points: int
    expanded_radius: int
    degenerate: list

    def to_dict(self):
        return asdict(self)


def fit_all(cloud, params=None, backend=None):
    """Fit every point; returns ``(PlaneSet, FitReport)``.

    Degenerate points get ``NaN`` planes here; callers decide whether that is
    fatal.
    """
    pts = as_cloud(cloud)
    graph = build_neighbor_graph(pts, params)
    mean, cov = _all_moments(pts, graph)
    w, vecs = (backend or kernels.active).eig3(cov)
    w, vecs = _order_eigenpairs(w, vecs)
    normals = vecs[:, :, 0].copy()
    intercepts = np.einsum("ij,ij->i", normals, mean)
    bad = _is_rank_deficient(w)
    normals[bad] = np.nan
    intercepts[bad] = np.nan
    # NaN rows fail every comparison and keep sign +1
    planes = canonicalize_orientation(PlaneSet(normals, intercepts), pts)
    report = FitReport(graph.params.to_dict(), pts.shape[0], len(graph.expanded), np.flatnonzero(bad).tolist())
    return planes, report


def compute_reference_planes(cloud, params=None):
    planes, report = fit_all(cloud, params)
    if report.degenerate:
        first = report.degenerate[0]
        raise DegenerateFitError(
            first, f"degenerate plane fit at {len(report.degenerate)} points (first: {report.degenerate[:10]})")
    return planes
