import numpy as np
import pytest

from poseprior import autodiff as ad


def _leaf(v):
    tape = ad.Tape()
    return tape, tape.leaf(v)


def test_matmul_identity():
    tape, a = _leaf([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, np.eye(2))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])


def test_softmax_uniform():
    _, v = _leaf([0.0, 0.0, 0.0])
    np.testing.assert_allclose(ad.softmax(v).value, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_layer_norm_constant_row_is_zero():
    _, v = _leaf(np.full((2, 5), 7.5))
    np.testing.assert_array_equal(ad.layer_norm(v).value, np.zeros((2, 5)))


def test_square_derivative():
    tape, x = _leaf(3.0)
    (g,) = tape.backward(ad.mul(x, x), [x])
    assert g == pytest.approx(6.0)


def test_softmax_sum_has_zero_gradient():
    tape, v = _leaf(np.random.default_rng(0).normal(size=7))
    (g,) = tape.backward(ad.sum_all(ad.softmax(v)), [v])
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_unused_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    unused = tape.leaf([[5.0]])
    g = tape.backward(ad.mean_square(x), [x, unused])
    np.testing.assert_allclose(g[0], [1.0, 2.0])
    np.testing.assert_array_equal(g[1], [[0.0]])


def test_backward_rejects_non_scalar():
    tape, x = _leaf([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        tape.backward(ad.scale(x, 2.0), [x])


def test_shape_errors_name_op_and_shapes():
    tape, a = _leaf(np.zeros((2, 3)))
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        ad.matmul(a, np.zeros((2, 2)))
    with pytest.raises(ad.ShapeError, match=r"add.*\(2, 3\).*\(2,\)"):
        ad.add(a, np.zeros(2))


def test_leading_batch_broadcast_allowed():
    tape, a = _leaf(np.ones((4, 2, 3)))
    b = tape.leaf(np.arange(3.0))
    out = ad.sum_all(ad.mul(a, b))
    ga, gb = tape.backward(out, [a, b])
    np.testing.assert_allclose(gb, [8.0, 8.0, 8.0])
    np.testing.assert_allclose(ga, np.broadcast_to(np.arange(3.0), (4, 2, 3)))


def test_finite_diff_check_examples():
    assert ad.finite_diff_check(lambda t, x: ad.mul(x, x), 2.0, 1e-5) <= 1e-8
    assert ad.finite_diff_check(lambda t, x: ad.scale(ad.sum_all(x), 0.0), np.ones(4)) == 0.0


def test_finite_diff_check_mlp():
    rng = np.random.default_rng(3)
    w1, b1 = rng.normal(size=(6, 10)), rng.normal(size=10)
    w2, b2 = rng.normal(size=(10, 2)), rng.normal(size=2)
    target = rng.normal(size=(5, 2))

    def mlp_mse(tape, x):
        h = ad.gelu(x @ w1 + b1)
        return ad.mean_square((h @ w2 + b2) - target)

    assert ad.finite_diff_check(mlp_mse, rng.normal(size=(5, 6))) <= 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ad.finite_diff_check(lambda t, x: ad.div(ad.sum_all(x), 0.0), np.ones(2))


def _op_cases():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(4, 3))
    other = rng.normal(size=(2, 4))
    pos = rng.uniform(0.5, 2.0, size=(2, 4))
    x3 = rng.normal(size=(3, 2, 4))
    return {
        "matmul": (lambda t, x: ad.sum_all(ad.mul(x @ w, x @ w)), (2, 4)),
        "batched_matmul": (
            lambda t, x: ad.mean_square(x @ ad.transpose(x, (0, 2, 1))), (2, 3, 4)),
        "add": (lambda t, x: ad.mean_square(x + other), (2, 4)),
        "sub": (lambda t, x: ad.mean_square(other - x), (2, 4)),
        "mul": (lambda t, x: ad.sum_all(ad.mul(ad.mul(x, other), x)), (2, 4)),
        "div": (lambda t, x: ad.sum_all(ad.div(other, ad.add(ad.mul(x, x), pos))), (2, 4)),
        "scale_neg": (lambda t, x: ad.mean_square(ad.neg(ad.scale(x, 3.0)) + other), (2, 4)),
        "reshape_transpose": (
            lambda t, x: ad.sum_all(ad.mul(ad.transpose(ad.reshape(x, (4, 2)), (1, 0)), other)),
            (2, 4)),
        "split_concat": (
            lambda t, x: ad.mean_square(ad.concat(ad.split(x, [1, 3])[::-1]) - other), (2, 4)),
        "expand": (lambda t, x: ad.sum_all(ad.mul(ad.expand(x, 0, 3), x3)), (2, 4)),
        "softmax": (lambda t, x: ad.sum_all(ad.mul(ad.softmax(x), other)), (2, 4)),
        "layer_norm": (lambda t, x: ad.sum_all(ad.mul(ad.layer_norm(x), other)), (2, 4)),
        "gelu": (lambda t, x: ad.sum_all(ad.mul(ad.gelu(x), other)), (2, 4)),
        "embedding": (
            lambda t, x: ad.mean_square(ad.embedding(x, [0, 3, 3, 1])), (5, 4)),
        "mean_square": (lambda t, x: ad.mean_square(x), (2, 4)),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_every_op_matches_finite_differences(name):
    fn, shape = _op_cases()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(100):
        worst = max(worst, ad.finite_diff_check(fn, rng.normal(size=shape), 1e-5))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.2e}"


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 4))

    def run():
        tape = ad.Tape()
        x = tape.leaf(x0)
        y = ad.mean_square(ad.softmax(ad.layer_norm(x @ w)))
        return y.value, tape.backward(y, [x])[0]

    v1, g1 = run()
    v2, g2 = run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_softmax_rows_sum_to_one_and_layer_norm_centered():
    rng = np.random.default_rng(6)
    _, x = _leaf(rng.normal(scale=10.0, size=(50, 17)))
    assert np.max(np.abs(ad.softmax(x).value.sum(-1) - 1.0)) <= 1e-12
    assert np.max(np.abs(ad.layer_norm(x).value.mean(-1))) <= 1e-10


def test_mixing_tapes_is_an_error():
    _, a = _leaf([1.0])
    _, b = _leaf([1.0])
    with pytest.raises(ValueError):
        ad.add(a, b)
