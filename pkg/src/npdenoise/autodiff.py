"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operators the denoising network needs are provided. Every forward
op checks its output for NaN/Inf.
"""

import numpy as np

from .errors import NumericalError, UsageError

DEGENERATE_NORM = 1e-8


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"tensor of shape {self.shape} is not a scalar")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by {op}")
    live = tuple(p for p in parents)
    return Tensor(data, parents=live, backward_fn=backward_fn, op=op)


def _shape_error(op, a, b):
    raise UsageError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        _shape_error("matmul", a, b)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), back, "matmul")


def add_bias(a, bias):
    a, bias = _wrap(a), _wrap(bias)
    if a.data.ndim != 2 or bias.data.shape != (a.shape[1],):
        _shape_error("add_bias", a, bias)

    def back(g):
        return g, g.sum(axis=0)

    return _result(a.data + bias.data, (a, bias), back, "add_bias")


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def back(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), back, "relu")


def concat_cols(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        _shape_error("concat_cols", a, b)
    p = a.shape[1]

    def back(g):
        return g[:, :p], g[:, p:]

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), back, "concat_cols")


def broadcast_row(v, m):
    v = _wrap(v)
    if v.data.ndim != 2 or v.shape[0] != 1:
        raise UsageError(f"broadcast_row: expected a 1 x n tensor, got {tuple(v.shape)}")

    def back(g):
        return (g.sum(axis=0, keepdims=True),)

    return _result(np.repeat(v.data, int(m), axis=0), (v,), back, "broadcast_row")


def sum_all(a):
    a = _wrap(a)

    def back(g):
        return (np.full(a.shape, float(g)),)

    return _result(np.array(a.data.sum()), (a,), back, "sum_all")


def mean_all(a):
    a = _wrap(a)
    n = a.data.size

    def back(g):
        return (np.full(a.shape, float(g) / n),)

    return _result(np.array(a.data.mean()), (a,), back, "mean_all")


def maxpool_cols(a):
    """Column maxima as a ``1 x d`` row. Ties go to the lowest row index."""
    a = _wrap(a)
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise UsageError(f"maxpool_cols: expected an N x d tensor with N >= 1, got {tuple(a.shape)}")
    rows = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])

    def back(g):
        out = np.zeros(a.shape)
        out[rows, cols] = g[0]
        return (out,)

    return _result(a.data[rows, cols][None, :], (a,), back, "maxpool_cols")


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        _shape_error("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        _shape_error("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a, k):
    a = _wrap(a)
    k = float(k)
    return _result(a.data * k, (a,), lambda g: (g * k,), "scale")


def rsub_scalar(k, a):
    """``k - a`` elementwise."""
    a = _wrap(a)
    return _result(float(k) - a.data, (a,), lambda g: (-g,), "rsub_scalar")


def absolute(a):
    a = _wrap(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def row_sqnorm(a):
    """Squared L2 norm of each row, shape ``(N,)``."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise UsageError(f"row_sqnorm: expected a 2D tensor, got {tuple(a.shape)}")
    return _result((a.data * a.data).sum(axis=1), (a,), lambda g: (2.0 * g[:, None] * a.data,), "row_sqnorm")


def cosine_sim_rows(a, b, zero_rows="raise"):
    """Per-row cosine similarity.

    A zero-norm row raises :class:`UsageError`, or with ``zero_rows="zero"``
    yields cosine 0 and passes no gradient.
    """
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape or a.data.ndim != 2:
        _shape_error("cosine_sim_rows", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    zero = ~(na > 1e-12) | ~(nb > 1e-12)
    if zero_rows == "raise":
        for name, norms in (("first", na), ("second", nb)):
            bad = np.flatnonzero(~(norms > 1e-12))
            if bad.size:
                raise UsageError(f"cosine_sim_rows: {name} argument has a zero-norm row at index {int(bad[0])}")
    na = np.where(zero, 1.0, na)
    nb = np.where(zero, 1.0, nb)
    dot = (a.data * b.data).sum(axis=1)
    s = np.where(zero, 0.0, dot / (na * nb))

    def back(g):
        g = np.where(zero, 0.0, g)
        ga = g[:, None] * (b.data / (na * nb)[:, None] - s[:, None] * a.data / (na * na)[:, None])
        gb = g[:, None] * (a.data / (na * nb)[:, None] - s[:, None] * b.data / (nb * nb)[:, None])
        return ga, gb

    return _result(s, (a, b), back, "cosine_sim_rows")


def project_onto_raw_planes(raw, points):
    """Project ``points`` onto the planes encoded by un-normalized rows ``(a, c)``.

    Rows whose normal part has norm ``<= 1e-8`` leave their point unchanged
    and pass no gradient. Returns ``(projected, degenerate_mask)``.
    """
    raw, points = _wrap(raw), _wrap(points)
    if raw.data.ndim != 2 or raw.shape[1] != 4 or points.shape != (raw.shape[0], 3):
        _shape_error("project_onto_raw_planes", raw, points)
    a = raw.data[:, :3]
    p = points.data
    r = np.sqrt(a[:, 0] * a[:, 0] + a[:, 1] * a[:, 1] + a[:, 2] * a[:, 2])
    bad = ~(r > DEGENERATE_NORM)
    safe = np.where(bad, 1.0, r)
    n = a / safe[:, None]
    c = raw.data[:, 3] / safe
    d = n[:, 0] * p[:, 0] + n[:, 1] * p[:, 1] + n[:, 2] * p[:, 2]
    out = p - d[:, None] * n + c[:, None] * n
    out[bad] = p[bad]
    s = d - c
    good = ~bad

    def back(g):
        gn = g * n
        gdotn = gn.sum(axis=1)
        g_n = -s[:, None] * g - gdotn[:, None] * p
        g_c = gdotn
        g_raw = np.zeros(raw.shape)
        radial = (g_n * n).sum(axis=1)
        g_raw[:, :3] = (g_n - radial[:, None] * n) / safe[:, None] - (g_c * c / safe)[:, None] * n
        g_raw[:, 3] = g_c / safe
        g_raw[bad] = 0.0
        g_pts = g - gdotn[:, None] * n
        g_pts[bad] = g[bad]
        return g_raw, g_pts

    res = _result(out, (raw, points), back, "project")
    return res, bad


class Tape:
    """Nodes reachable from a loss in topological order (inputs first)."""

    def __init__(self, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


def numeric_grad(f, x, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x.data``."""
    out = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(f, x, h=1e-4, floor=1e-8):
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar :class:`Tensor`
    computed from the tensor(s) ``x``. Gradients already on ``x`` are cleared.
    """
    xs = x if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    backward(f())
    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, float(relative_error(analytic, numeric_grad(f, t, h), floor).max()))
    return worst
