"""Pure-Python/numpy fallback for the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module. Squared distances are
evaluated as ``dx*dx + dy*dy + dz*dz`` in that order in both backends.
"""

import numpy as np

BACKEND = "python"

_SLACK = 1.0 - 1e-7


def _cell_of(q, origin, cell, dims):
    c = np.floor((q - origin) / cell).astype(np.int64)
    return np.minimum(np.maximum(c, 0), dims - 1)


def _ring_cells(center, r, dims):
    """Linear ids of in-bounds cells at Chebyshev distance exactly ``r``."""
    lo = center - r
    hi = center + r
    xs = np.arange(max(lo[0], 0), min(hi[0], dims[0] - 1) + 1)
    ys = np.arange(max(lo[1], 0), min(hi[1], dims[1] - 1) + 1)
    zs = np.arange(max(lo[2], 0), min(hi[2], dims[2] - 1) + 1)
    if xs.size == 0 or ys.size == 0 or zs.size == 0:
        return np.empty(0, dtype=np.int64)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    ring = np.maximum(np.maximum(np.abs(gx - center[0]), np.abs(gy - center[1])), np.abs(gz - center[2])) == r
    return (gx[ring] + dims[0] * (gy[ring] + dims[1] * gz[ring])).ravel()


def _gather(cells, order, starts):
    if cells.size == 0:
        return np.empty(0, dtype=np.int64)
    parts = [order[starts[c]:starts[c + 1]] for c in cells]
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def _sqdist(points, idx, q):
    dx = q[0] - points[idx, 0]
    dy = q[1] - points[idx, 1]
    dz = q[2] - points[idx, 2]
    return dx * dx + dy * dy + dz * dz


def knn(points, order, starts, origin, cell, dims, queries, k):
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)
    origin = np.asarray(origin, dtype=np.float64)
    k = min(int(k), points.shape[0])
    nq = queries.shape[0]
    out_idx = np.empty((nq, k), dtype=np.int64)
    out_d2 = np.empty((nq, k), dtype=np.float64)
    max_ring = int(dims.max())
    for qi in range(nq):
        q = queries[qi]
        center = _cell_of(q, origin, cell, dims)
        best_i = np.empty(0, dtype=np.int64)
        best_d = np.empty(0, dtype=np.float64)
        r = 0
        while r <= max_ring:
            cand = _gather(_ring_cells(center, r, dims), order, starts)
            if cand.size:
                d2 = _sqdist(points, cand, q)
                best_i = np.concatenate([best_i, cand])
                best_d = np.concatenate([best_d, d2])
                sel = np.lexsort((best_i, best_d))[:k]
                best_i, best_d = best_i[sel], best_d[sel]
            if best_i.size == k:
                lb = r * cell * _SLACK
                if lb * lb > best_d[-1]:
                    break
            r += 1
        out_idx[qi] = best_i
        out_d2[qi] = best_d
    return out_idx, out_d2


def radius(points, order, starts, origin, cell, dims, queries, rad, max_k):
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)
    origin = np.asarray(origin, dtype=np.float64)
    r2 = rad * rad
    ring_f = np.ceil(rad / cell / _SLACK)
    rings = int(dims.max()) if not ring_f < dims.max() else int(ring_f)
    offsets = np.zeros(queries.shape[0] + 1, dtype=np.int64)
    all_i, all_d = [], []
    for qi in range(queries.shape[0]):
        q = queries[qi]
        center = _cell_of(q, origin, cell, dims)
        cells = np.concatenate([_ring_cells(center, r, dims) for r in range(rings + 1)])
        cand = _gather(cells, order, starts)
        d2 = _sqdist(points, cand, q)
        keep = d2 <= r2
        cand, d2 = cand[keep], d2[keep]
        sel = np.lexsort((cand, d2))[:max_k]
        all_i.append(cand[sel])
        all_d.append(d2[sel])
        offsets[qi + 1] = offsets[qi] + sel.size
    idx = np.concatenate(all_i) if all_i else np.empty(0, dtype=np.int64)
    d2 = np.concatenate(all_d) if all_d else np.empty(0, dtype=np.float64)
    return offsets, idx.astype(np.int64), d2


def _jacobi3(a):
    """Cyclic Jacobi on one symmetric 3x3 (list of lists, modified in place)."""
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    for _sweep in range(50):
        off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]
        diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2]
        if off <= 1e-36 * diag or off == 0.0:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            t = 1.0 / (abs(theta) + (theta * theta + 1.0) ** 0.5)
            if theta < 0.0:
                t = -t
            c = 1.0 / (t * t + 1.0) ** 0.5
            s = t * c
            for r in range(3):
                arp = a[r][p]
                arq = a[r][q]
                a[r][p] = c * arp - s * arq
                a[r][q] = s * arp + c * arq
            for r in range(3):
                apr = a[p][r]
                aqr = a[q][r]
                a[p][r] = c * apr - s * aqr
                a[q][r] = s * apr + c * aqr
            for r in range(3):
                vrp = v[r][p]
                vrq = v[r][q]
                v[r][p] = c * vrp - s * vrq
                v[r][q] = s * vrp + c * vrq
    return [a[0][0], a[1][1], a[2][2]], v


def eig3(mats):
    """Unsorted eigenpairs of a stack of symmetric 3x3 matrices.

    Returns ``(w, V)`` with eigenvectors in the columns of ``V[i]``.
    """
    mats = np.asarray(mats, dtype=np.float64).reshape(-1, 3, 3)
    w = np.empty((mats.shape[0], 3))
    vecs = np.empty((mats.shape[0], 3, 3))
    for i in range(mats.shape[0]):
        vals, v = _jacobi3(mats[i].tolist())
        w[i] = vals
        vecs[i] = v
    return w, vecs
