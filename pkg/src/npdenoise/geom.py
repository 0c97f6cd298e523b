"""Point clouds, planes, projection, normalization and noise.

A point cloud is an ``(N, 3)`` float64 array; row order is the correspondence
key between clean, noisy and denoised clouds and their plane sets.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import DegeneratePlaneError, UsageError

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6
DEGENERATE_NORM = 1e-8


def as_cloud(points, name="cloud"):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise UsageError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise UsageError(f"{name} is empty")
    if not np.all(np.isfinite(pts)):
        raise UsageError(f"{name} contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class Plane:
    """The plane ``{x : normal . x = intercept}`` with a unit normal."""

    normal: tuple
    intercept: float

    def __post_init__(self):
        n = tuple(float(v) for v in self.normal)
        if len(n) != 3:
            raise UsageError("plane normal must have 3 components")
        length = np.sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2])
        if abs(length - 1.0) > UNIT_TOL:
            raise UsageError(f"plane normal is not unit length (|n| = {length!r})")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "intercept", float(self.intercept))

    def as_row(self):
        return np.array([*self.normal, self.intercept])


@dataclass
class PlaneSet:
    """Per-point planes stored as ``(N, 3)`` unit normals and ``(N,)`` intercepts."""

    normals: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.intercepts = np.asarray(self.intercepts, dtype=np.float64).reshape(-1)
        if self.normals.shape[0] != self.intercepts.shape[0]:
            raise UsageError("normals and intercepts differ in length")

    @classmethod
    def from_array(cls, rows):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != 4:
            raise UsageError(f"plane rows must have shape (N, 4), got {rows.shape}")
        return cls(rows[:, :3].copy(), rows[:, 3].copy())

    @classmethod
    def from_planes(cls, planes):
        return cls.from_array(np.array([p.as_row() for p in planes]).reshape(-1, 4))

    def as_array(self):
        return np.column_stack([self.normals, self.intercepts])

    def __len__(self):
        return self.normals.shape[0]

    def __getitem__(self, i):
        return Plane(self.normals[i], self.intercepts[i])

    def check(self, tol=1e-6):
        err = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0)
        if err.size and err.max() > tol:
            i = int(np.argmax(err))
            raise UsageError(f"plane {i} normal is not unit length")


def project_point(p, plane):
    """Orthogonal projection of ``p`` onto ``plane``."""
    px, py, pz = (float(v) for v in p)
    nx, ny, nz = plane.normal
    c = plane.intercept
    d = nx * px + ny * py + nz * pz
    return np.array([px - d * nx + c * nx, py - d * ny + c * ny, pz - d * nz + c * nz])


def project_cloud(cloud, planes):
    """Row-wise :func:`project_point`; same arithmetic, vectorized."""
    pts = as_cloud(cloud)
    if len(planes) != pts.shape[0]:
        raise UsageError(f"cloud has {pts.shape[0]} points but {len(planes)} planes")
    n = planes.normals
    d = n[:, 0] * pts[:, 0] + n[:, 1] * pts[:, 1] + n[:, 2] * pts[:, 2]
    return pts - d[:, None] * n + planes.intercepts[:, None] * n


def plane_from_raw(raw):
    """Normalize one network output row ``(a, c)`` to a unit-normal plane."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.shape[0] != 4:
        raise UsageError(f"raw plane must have 4 components, got {raw.shape[0]}")
    norm = np.sqrt(raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2])
    if not norm > DEGENERATE_NORM:
        raise DegeneratePlaneError(f"normal part has norm {norm:.3g}")
    return Plane(raw[:3] / norm, raw[3] / norm)


def planes_from_raw(raw, points=None):
    """Row-wise :func:`plane_from_raw`.

    Returns ``(PlaneSet, degenerate_mask)``. A degenerate row becomes the
    plane through its own point with normal +x, so projecting leaves that
    point where it is; ``points`` is required for that substitution.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != 4:
        raise UsageError(f"raw planes must have shape (N, 4), got {raw.shape}")
    norm = np.sqrt(raw[:, 0] * raw[:, 0] + raw[:, 1] * raw[:, 1] + raw[:, 2] * raw[:, 2])
    bad = ~(norm > DEGENERATE_NORM)
    safe = np.where(bad, 1.0, norm)
    normals = raw[:, :3] / safe[:, None]
    intercepts = raw[:, 3] / safe
    if bad.any():
        if points is None:
            i = int(np.flatnonzero(bad)[0])
            raise DegeneratePlaneError(f"row {i} has a near-zero normal part")
        pts = as_cloud(points)
        normals[bad] = (1.0, 0.0, 0.0)
        intercepts[bad] = pts[bad, 0]
        log.warning("%d degenerate plane rows passed through unchanged", int(bad.sum()))
    return PlaneSet(normals, intercepts), bad


@dataclass(frozen=True)
class CubeTransform:
    """``normalized = (original - center) * scale``."""

    center: tuple
    scale: float

    def apply(self, cloud):
        return (as_cloud(cloud) - np.asarray(self.center)) * self.scale

    def invert(self, cloud):
        return as_cloud(cloud) / self.scale + np.asarray(self.center)


def normalize_unit_cube(cloud):
    """Center the bounding box at the origin and scale its longest side to 1."""
    pts = as_cloud(cloud)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    extent = float((hi - lo).max())
    scale = 1.0 / extent if extent > 0 else 1.0
    out = np.clip((pts - center) * scale, -0.5, 0.5)
    return out, CubeTransform(tuple(center.tolist()), scale)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise UsageError(f"noise sigma must be finite and >= 0, got {self.sigma}")


def add_gaussian_noise(cloud, model, cloud_id=0):
    """Add i.i.d. N(0, sigma^2) noise per coordinate.

    Point ``i`` draws from its own counter stream keyed by
    ``(seed, cloud_id, i)``.
    """
    pts = as_cloud(cloud)
    if model.sigma == 0:
        return pts.copy()
    key = rng.stream_key(model.seed, cloud_id)
    noise = rng.normals(key, np.arange(pts.shape[0]), 3)
    return pts + model.sigma * noise
