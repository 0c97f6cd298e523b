"""Independent reference computations used by the tests.

Nothing here imports the network or autodiff code; each function is a
direct transcription of the definition it checks against.
"""

import numpy as np


def mlp_rows(x, layers, final_linear):
    """Apply dense layers one row at a time with explicit loops."""
    out = []
    for row in x:
        h = list(row)
        for li, (w, b) in enumerate(layers):
            nxt = []
            for j in range(w.shape[1]):
                acc = b[j]
                for i in range(w.shape[0]):
                    acc += h[i] * w[i, j]
                if not (final_linear and li == len(layers) - 1):
                    acc = acc if acc > 0 else 0.0
                nxt.append(acc)
            h = nxt
        out.append(h)
    return np.array(out)


def npd_forward(points, params, n_local, n_head, use_global=True):
    local_layers = [(params[f"local.{i}.weight"], params[f"local.{i}.bias"]) for i in range(n_local)]
    head_layers = [(params[f"head.{i}.weight"], params[f"head.{i}.bias"]) for i in range(n_head)]
    local = mlp_rows(points, local_layers, final_linear=False)
    if use_global:
        glob = [max(local[r, c] for r in range(local.shape[0])) for c in range(local.shape[1])]
        feats = np.array([list(row) + glob for row in local])
    else:
        feats = local
    return mlp_rows(feats, head_layers, final_linear=True)


def preactivations(points, params, n_local, n_head):
    """All hidden pre-ReLU values and the maxpool top-2 gaps, for kink detection."""
    pre, h = [], points
    for i in range(n_local):
        z = h @ params[f"local.{i}.weight"] + params[f"local.{i}.bias"]
        pre.append(z.ravel())
        h = np.maximum(z, 0)
    s = np.sort(h, axis=0)
    gaps = s[-1] - s[-2] if h.shape[0] > 1 else np.full(h.shape[1], np.inf)
    h = np.hstack([h, np.tile(h.max(0), (h.shape[0], 1))])
    for i in range(n_head - 1):
        z = h @ params[f"head.{i}.weight"] + params[f"head.{i}.bias"]
        pre.append(z.ravel())
        h = np.maximum(z, 0)
    return np.concatenate(pre), gaps


def project_scalar(p, raw):
    a = raw[:3]
    r = np.sqrt(a[0] ** 2 + a[1] ** 2 + a[2] ** 2)
    n = [a[k] / r for k in range(3)]
    c = raw[3] / r
    d = n[0] * p[0] + n[1] * p[1] + n[2] * p[2]
    return np.array([p[k] - d * n[k] + c * n[k] for k in range(3)])


def npd_losses(points, clean, ref, raw, alpha):
    """loss1, loss2 and the blend, written out per point."""
    n = points.shape[0]
    l1 = 0.0
    l2 = 0.0
    for i in range(n):
        q = project_scalar(points[i], raw[i])
        l1 += sum((q[k] - clean[i][k]) ** 2 for k in range(3))
        dot = sum(raw[i][k] * ref[i][k] for k in range(4))
        cos = dot / np.sqrt(sum(v * v for v in raw[i])) / np.sqrt(sum(v * v for v in ref[i]))
        l2 += abs(1.0 - cos)
    l1 /= n
    l2 /= n
    return l1, l2, alpha * l1 + (1 - alpha) * l2


def chamfer_loops(a, b):
    def one_side(x, y):
        tot = 0.0
        for p in x:
            best = np.inf
            for q in y:
                d = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
                best = min(best, d)
            tot += best
        return tot
    return (one_side(a, b) + one_side(b, a)) / len(a)


def gradcheck_problem(seed, n=16, local=(8, 16), head=(8, 4), alpha=0.5, margin=1e-3, h=1e-4):
    """A random full-loss problem with no ReLU kink or maxpool tie within reach of ``h``.

    Returns ``(points, clean, ref_rows, params, tries)``.
    """
    gen = np.random.default_rng(seed)
    tries = 0
    while True:
        tries += 1
        clean = gen.uniform(-0.5, 0.5, (n, 3))
        points = clean + gen.normal(scale=0.02, size=(n, 3))
        ref = gen.normal(size=(n, 4))
        ref[:, :3] /= np.linalg.norm(ref[:, :3], axis=1, keepdims=True)
        params, fan_in = {}, 3
        widths = list(local)
        for i, w in enumerate(widths):
            params[f"local.{i}.weight"] = gen.uniform(-1, 1, (fan_in, w)) * np.sqrt(6 / fan_in)
            params[f"local.{i}.bias"] = gen.uniform(-0.1, 0.1, w)
            fan_in = w
        fan_in = 2 * widths[-1]
        for i, w in enumerate(head):
            params[f"head.{i}.weight"] = gen.uniform(-1, 1, (fan_in, w)) * np.sqrt(6 / fan_in)
            params[f"head.{i}.bias"] = gen.uniform(-0.1, 0.1, w)
            fan_in = w
        pre, gaps = preactivations(points, params, len(local), len(head))
        raw = npd_forward(points, params, len(local), len(head))
        ok = np.abs(pre).min() > margin and gaps.min() > margin
        ok = ok and np.linalg.norm(raw[:, :3], axis=1).min() > 1e-2
        if ok:
            return points, clean, ref, params, tries
