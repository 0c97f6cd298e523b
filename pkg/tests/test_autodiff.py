import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npdenoise import autodiff as ad
from npdenoise.errors import NumericalError, UsageError


def leaf(x):
    return ad.tensor(np.array(x, dtype=float), requires_grad=True)


def test_matmul_identity_and_loops(rng):
    x = rng.normal(size=(2, 5))
    assert np.array_equal(ad.matmul(ad.tensor(np.eye(2)), ad.tensor(x)).data, x)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(6):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.allclose(ad.matmul(ad.tensor(a), ad.tensor(b)).data, ref, atol=1e-12)


@pytest.mark.parametrize("op, args", [
    (ad.matmul, ((2, 3), (2, 3))),
    (ad.add_bias, ((2, 3), (2,))),
    (ad.concat_cols, ((2, 3), (3, 3))),
    (ad.add, ((2, 3), (3, 2))),
    (ad.cosine_sim_rows, ((2, 4), (3, 4))),
])
def test_shape_errors_name_shapes(op, args):
    with pytest.raises(UsageError) as exc:
        op(*[ad.tensor(np.ones(s)) for s in args])
    assert str(args[0]) in str(exc.value) and str(args[1]) in str(exc.value)


def test_relu_and_maxpool():
    assert np.array_equal(ad.relu(ad.tensor([-1.0, 2.0])).data, [0, 2])
    assert np.array_equal(ad.maxpool_cols(ad.tensor([[1.0, 5], [3, 2]])).data, [[3, 5]])
    row = np.array([[1.0, -2, 3]])
    assert np.array_equal(ad.maxpool_cols(ad.tensor(row)).data, row)


def test_maxpool_scan_and_tie_routing(rng):
    a = rng.normal(size=(20, 7))
    ref = np.array([[max(a[r, c] for r in range(20)) for c in range(7)]])
    assert np.array_equal(ad.maxpool_cols(ad.tensor(a)).data, ref)
    t = leaf([[1.0, 2.0], [1.0, 0.0], [0.5, 2.0]])
    ad.backward(ad.sum_all(ad.maxpool_cols(t)))
    assert np.array_equal(t.grad, [[1, 1], [0, 0], [0, 0]])


def test_maxpool_gradcheck(rng):
    x = leaf(rng.normal(size=(9, 4)))
    w = rng.normal(size=(1, 4))
    assert ad.grad_check(lambda: ad.sum_all(ad.matmul(ad.maxpool_cols(x), ad.tensor(w.T))), x) < 1e-6


def test_cosine_scalar_oracle_and_grad(rng):
    a, b = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    got = ad.cosine_sim_rows(ad.tensor(a), ad.tensor(b)).data
    for i in range(10):
        ref = sum(a[i] * b[i]) / np.sqrt(sum(a[i] ** 2)) / np.sqrt(sum(b[i] ** 2))
        assert abs(got[i] - ref) < 1e-7
    assert np.allclose(ad.cosine_sim_rows(ad.tensor(a), ad.tensor(a)).data, 1)
    assert np.allclose(ad.cosine_sim_rows(ad.tensor(a), ad.tensor(-a)).data, -1)
    x, y = leaf(a), leaf(b)
    f = lambda: ad.sum_all(ad.scale(ad.cosine_sim_rows(x, y), 1.7))
    assert ad.grad_check(f, x) < 1e-5
    assert ad.grad_check(f, y) < 1e-5


def test_cosine_zero_row():
    a = np.ones((3, 4))
    a[2] = 0
    with pytest.raises(UsageError, match="index 2"):
        ad.cosine_sim_rows(ad.tensor(a), ad.tensor(np.ones((3, 4))))


def test_backward_closed_forms(rng):
    x = leaf(rng.normal(size=(5, 3)))
    ad.backward(ad.sum_all(x))
    assert np.array_equal(x.grad, np.ones((5, 3)))
    x = leaf(rng.normal(size=(5, 3)))
    y = rng.normal(size=(5, 3))
    ad.backward(ad.mean_all(ad.row_sqnorm(ad.sub(x, ad.tensor(y)))))
    assert np.allclose(x.grad, 2 * (x.data - y) / 5, atol=1e-15)


def test_backward_needs_scalar():
    with pytest.raises(UsageError):
        ad.backward(leaf(np.ones(3)))


def test_shared_subexpression_accumulates():
    x = leaf([[2.0]])
    y = ad.add(ad.matmul(x, x), x)
    ad.backward(ad.sum_all(y))
    assert x.grad[0, 0] == pytest.approx(5.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NumericalError):
        ad.scale(ad.tensor([1e308]), 1e10)


@pytest.mark.parametrize("which", ["broadcast", "concat", "bias", "relu", "abs", "rsub"])
def test_small_op_grads(which, rng):
    a = leaf(rng.normal(size=(6, 3)) + 0.05)
    v = leaf(rng.normal(size=(1, 3)))
    b = leaf(rng.normal(size=3))
    w = ad.tensor(rng.normal(size=(6, 3)))
    fns = {
        "broadcast": (lambda: ad.sum_all(ad.sub(ad.broadcast_row(v, 6), w) * 1.0), v),
        "concat": (lambda: ad.sum_all(ad.row_sqnorm(ad.concat_cols(a, w))), a),
        "bias": (lambda: ad.sum_all(ad.row_sqnorm(ad.add_bias(w, b))), b),
        "relu": (lambda: ad.sum_all(ad.row_sqnorm(ad.relu(a))), a),
        "abs": (lambda: ad.sum_all(ad.absolute(a)), a),
        "rsub": (lambda: ad.sum_all(ad.row_sqnorm(ad.rsub_scalar(2.0, a))), a),
    }
    f, x = fns[which]
    assert ad.grad_check(f, x) < 1e-5


def test_projection_grad(rng):
    raw = leaf(rng.normal(size=(12, 4)))
    pts = leaf(rng.uniform(-1, 1, (12, 3)))
    target = ad.tensor(rng.normal(size=(12, 3)))

    def f():
        out, _ = ad.project_onto_raw_planes(raw, pts)
        return ad.mean_all(ad.row_sqnorm(ad.sub(out, target)))

    assert ad.grad_check(f, raw) < 1e-5
    assert ad.grad_check(f, pts) < 1e-5


def test_projection_degenerate_row_passes_point(rng):
    raw = leaf(np.array([[0, 0, 0, 1.0], [0, 0, 1, 0.5]]))
    pts = leaf(np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]))
    out, bad = ad.project_onto_raw_planes(raw, pts)
    assert bad.tolist() == [True, False]
    assert np.array_equal(out.data[0], pts.data[0])
    ad.backward(ad.sum_all(out))
    assert np.array_equal(raw.grad[0], np.zeros(4))
    assert np.array_equal(pts.grad[0], np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matmul_grad_property(m, k, seed):
    g = np.random.default_rng(seed)
    a, b = leaf(g.normal(size=(m, k))), leaf(g.normal(size=(k, 2)))
    f = lambda: ad.sum_all(ad.row_sqnorm(ad.matmul(a, b)))
    assert ad.grad_check(f, a, floor=1e-6) < 1e-5
    assert ad.grad_check(f, b, floor=1e-6) < 1e-5


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([0.0]))[0] == 0
    assert ad.relative_error(np.array([1.0]), np.array([1.1]))[0] == pytest.approx(0.1 / 1.1)


def test_cosine_zero_rows_tolerated(rng):
    a = leaf(rng.normal(size=(4, 4)))
    a.data[1] = 0
    b = ad.tensor(rng.normal(size=(4, 4)))
    s = ad.cosine_sim_rows(a, b, zero_rows="zero")
    assert s.data[1] == 0
    ad.backward(ad.sum_all(s))
    assert np.array_equal(a.grad[1], np.zeros(4))
    assert np.isfinite(a.grad).all()
