import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from supertickets import autodiff as ad
from supertickets.autodiff import Tape, Tensor, backward

from oracles import directional_diff, layer_norm_ref, rel_err, softmax_ref

F64 = np.float64


def grad_of(fn, *arrays):
    """Analytic gradients of scalar fn(*tensors) for each input array."""
    tape = Tape()
    vs = [tape.variable(a, F64) for a in arrays]
    g = backward(fn(*vs))
    return [g.of(v) for v in vs]


def value_of(fn, *arrays):
    return fn(*[Tensor(np.asarray(a, F64)) for a in arrays]).item()


def probe(fn, arrays, n_probes=20, seed=0, tol=1e-5):
    """Random directional-derivative probes against central differences."""
    rng = np.random.default_rng(seed)
    grads = grad_of(fn, *arrays)
    worst = 0.0
    for _ in range(n_probes):
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, dirs))

        def f(t, dirs=dirs):
            return value_of(fn, *[a + t * v for a, v in zip(arrays, dirs)])

        numeric = directional_diff(f, 0.0, 1.0)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    assert worst < tol, worst


def weighted_sum(t, w):
    return ad.sum_(ad.mul(t, Tensor(w)))


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_projector():
    eye = Tensor(np.eye(2, dtype=F64))
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(ad.matmul(eye, a).data, a.data)
    p = ad.matmul(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])), Tensor(np.array([[5.0], [7.0]])))
    assert np.array_equal(p.data, [[5.0], [0.0]])


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum_matches_fd():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    ga, gb = grad_of(lambda x, y: ad.sum_(ad.matmul(x, y)), a, b)
    eps = 1e-6
    fd = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            ap, am = a.copy(), a.copy()
            ap[i, j] += eps
            am[i, j] -= eps
            fd[i, j] = ((ap @ b).sum() - (am @ b).sum()) / (2 * eps)
    assert rel_err(ga, fd) < 1e-4
    assert np.allclose(ga, np.ones((3, 3)) @ b.T) and np.allclose(gb, a.T @ np.ones((3, 3)))


def test_batched_matmul_probe():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((2, 3, 4, 5))
    probe(lambda x, y: weighted_sum(ad.matmul(x, y), w),
          [rng.standard_normal((2, 1, 4, 6)), rng.standard_normal((3, 6, 5))])


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert np.allclose(ad.softmax_rows(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    for c in (-50.0, 0.0, 3.0, 800.0):
        assert np.allclose(ad.softmax_rows(Tensor(np.full((1, 3), c))).data, [[1 / 3] * 3], atol=1e-12)
    out = ad.softmax_rows(Tensor(np.array([[1.0, 2.0, 3.0]], dtype=F64))).data[0]
    assert np.allclose(out, softmax_ref([1.0, 2.0, 3.0]), rtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-30, 30)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = ad.softmax_rows(Tensor(x)).data
    assert (s >= 0).all()
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(ad.softmax_rows(Tensor(x + c)).data, s, atol=1e-6)


def test_softmax_probe():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((4, 5))
    probe(lambda x: weighted_sum(ad.softmax_rows(x), w), [rng.standard_normal((4, 5))])


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(ad.layer_norm(Tensor(np.full((2, 4), 3.0)), g, b).data, np.zeros((2, 4)))
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    bias = np.array([1.0, -2.0, 0.5, 4.0])
    assert np.allclose(ad.layer_norm(x, Tensor(np.zeros(4)), Tensor(bias)).data, np.broadcast_to(bias, (3, 4)))
    y = ad.layer_norm(x, g, b, 1e-5).data
    v = x.data.var(axis=-1)
    assert np.allclose(y.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), v / (v + 1e-5), rtol=1e-12)
    assert np.allclose(y, layer_norm_ref(x.data, np.ones(4), np.zeros(4), 1e-5), rtol=1e-12)


def test_layer_norm_probe():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((2, 3, 6))
    probe(lambda x, g, b: weighted_sum(ad.layer_norm(x, g, b, 1e-5), w),
          [rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6)])


# ---------------------------------------------------------------- pointwise


def test_pointwise_examples():
    assert np.array_equal(ad.pointwise(Tensor(np.array([-1.0, 0.0, 2.0])), "relu").data, [0.0, 0.0, 2.0])
    z = ad.pointwise(Tensor(np.arange(6.0).reshape(2, 3)), "scale", 0.0)
    assert np.array_equal(z.data, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ad.pointwise(Tensor(np.ones(2)), "tanh")


@pytest.mark.parametrize("kind", ["gelu", "relu", "mul", "add", "scale"])
def test_pointwise_probe(kind):
    rng = np.random.default_rng(5)
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((3, 4))
    if kind == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep probes away from the kink
        probe(lambda a: weighted_sum(ad.pointwise(a, "relu"), w), [x])
    elif kind == "gelu":
        probe(lambda a: weighted_sum(ad.pointwise(a, "gelu"), w), [x])
    elif kind == "scale":
        probe(lambda a: weighted_sum(ad.pointwise(a, "scale", -1.7), w), [x])
    else:
        # broadcasting second operand
        probe(lambda a, b: weighted_sum(ad.pointwise(a, kind, b), w), [x, rng.standard_normal((1, 4))])


# ---------------------------------------------------------------- losses


def test_loss_examples():
    ce = ad.loss(Tensor(np.zeros((5, 2), dtype=F64)), np.array([0, 1, 1, 0, 1]), "cross_entropy")
    assert ce.item() == pytest.approx(np.log(2), rel=1e-15)
    x = Tensor(np.arange(4.0).reshape(4, 1))
    assert ad.loss(x, np.arange(4.0), "mse").item() == 0.0
    with pytest.raises(ad.InputError):
        ad.loss(Tensor(np.zeros((2, 2))), np.array([0, 2]), "cross_entropy")


def test_cross_entropy_against_high_precision():
    import mpmath

    rng = np.random.default_rng(6)
    z = rng.standard_normal((6, 4)) * 5
    y = rng.integers(0, 4, 6)
    mpmath.mp.dps = 40
    ref = mpmath.fsum(
        mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row)) - mpmath.mpf(row[t]) for row, t in zip(z, y)
    ) / 6
    assert ad.loss(Tensor(z), y, "cross_entropy").item() == pytest.approx(float(ref), rel=1e-13)


@pytest.mark.parametrize("kind", ["cross_entropy", "mse"])
@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_loss_probe(kind, reduction):
    rng = np.random.default_rng(7)
    targets = rng.integers(0, 3, 5) if kind == "cross_entropy" else rng.standard_normal(5)
    shape = (5, 3) if kind == "cross_entropy" else (5, 1)
    probe(lambda z: ad.loss(z, targets, kind, reduction), [rng.standard_normal(shape)])


def test_gather_and_reductions_probe():
    rng = np.random.default_rng(8)
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    w = rng.standard_normal((2, 3, 5))
    probe(lambda t: weighted_sum(ad.gather_rows(t, ids), w), [rng.standard_normal((4, 5))])
    w2 = rng.standard_normal((2, 5))
    probe(lambda t: weighted_sum(ad.mean(t, axis=1), w2), [rng.standard_normal((2, 3, 5))])
    probe(lambda t: ad.sum_(ad.reshape(ad.transpose(t, (1, 0, 2)), (3, 10))), [rng.standard_normal((2, 3, 5))])


# ---------------------------------------------------------------- backward


def test_backward_examples():
    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0]))
    g = backward(ad.sum_(x))
    assert np.array_equal(g.of(x), [1.0, 1.0])
    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0]))
    g = backward(ad.sum_(ad.mul(x, x)))
    assert np.array_equal(g.of(x), [2.0, 4.0])


def test_backward_unreached_gets_zero_and_nonscalar_rejected():
    tape = Tape()
    x = tape.variable(np.ones(3))
    unused = tape.variable(np.ones((2, 2)))
    g = backward(ad.sum_(x))
    assert np.array_equal(g.of(unused), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        backward(ad.mul(x, x))


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(9)
    a, b = rng.standard_normal((4, 6)).astype(np.float32), rng.standard_normal((6, 3)).astype(np.float32)

    def run():
        tape = Tape()
        va, vb = tape.variable(a), tape.variable(b)
        h = ad.gelu(ad.matmul(va, vb))
        loss = ad.loss(ad.add(h, ad.mul(h, h)), np.array([0, 1, 2, 0]), "cross_entropy")
        g = backward(loss)
        return g.of(va), g.of(vb)

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_non_finite_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.add(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


def test_constants_do_not_record():
    tape = Tape()
    x = tape.variable(np.ones(2))
    n = len(tape)
    c = ad.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert c.tape is None and len(tape) == n
    assert ad.add(x, c).tape is tape


def test_default_precision_is_32_bit():
    assert Tape().variable([1.0, 2.0]).dtype == np.float32
    assert Tape().variable(np.ones(2, dtype=F64)).dtype == F64
