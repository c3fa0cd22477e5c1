import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vqa_forensics import autodiff as ad


def central_diff(fn, xs, i, h=1e-5):
    """Numerical d fn / d xs[i], elementwise, by central differences."""
    x = xs[i]
    out = np.zeros_like(x)
    for j in np.ndindex(x.shape):
        up = [a.copy() for a in xs]
        dn = [a.copy() for a in xs]
        up[i][j] += h
        dn[i][j] -= h
        out[j] = (float(fn(*up)) - float(fn(*dn))) / (2 * h)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-6))


def check_gradients(build, shapes, seed=0):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    tape = ad.Tape()
    leaves = [tape.leaf(x) for x in xs]
    analytic = ad.grads(tape, build(*leaves), leaves)

    def value(*arrs):
        return build(*(ad.Tensor(a) for a in arrs)).data

    for i in range(len(xs)):
        numeric = central_diff(value, xs, i)
        assert rel_err(analytic[i], numeric) < 1e-3, f"input {i}"


# --------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), a).data, a)


def test_matmul_hand_example():
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_annihilator():
    a = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(ad.matmul(a, np.zeros((4, 2))).data, np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


# --------------------------------------------------------------- softmax


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(np.zeros(2)).data, [0.5, 0.5])


def test_softmax_matches_direct_formula():
    v = np.array([1.0, 2.0, 3.0])
    e = np.exp(v)
    np.testing.assert_allclose(ad.softmax(v).data, e / e.sum(), rtol=1e-12)


def test_softmax_empty_rejected():
    with pytest.raises(ValueError):
        ad.softmax(np.zeros(0))


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalization(v, c):
    s = ad.softmax(v).data
    assert abs(s.sum() - 1.0) < 1e-6
    assert np.all(s > 0) or v.max() - v.min() > 700
    np.testing.assert_allclose(ad.softmax(v + c).data, s, atol=1e-9)


# --------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform():
    loss = ad.cross_entropy(np.zeros((1, 4)), [2], [True])
    assert loss.data == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_near_one_hot():
    logits = np.zeros((1, 5))
    logits[0, 3] = 30.0
    assert ad.cross_entropy(logits, [3]).data < 1e-9


def test_cross_entropy_matches_explicit_log_softmax():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5)) * 3
    targets = [4, 0, 2]
    mask = [True, False, True]
    expected = []
    for row, t, m in zip(logits, targets, mask):
        if m:
            expected.append(-(row[t] - math.log(sum(math.exp(x) for x in row))))
    got = ad.cross_entropy(logits, targets, mask).data
    assert got == pytest.approx(sum(expected) / len(expected), abs=1e-9)


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        ad.cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        ad.cross_entropy(np.zeros((2, 3)), [0, 1], [False, False])


@given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20)),
       arrays(np.int64, 4, elements=st.integers(0, 5)))
def test_cross_entropy_nonnegative(logits, targets):
    assert ad.cross_entropy(logits, targets).data >= 0


# --------------------------------------------------------------- grad_wrt_leaf


def test_disconnected_leaf_gets_zero_gradient():
    tape = ad.Tape()
    a = tape.leaf(np.ones(3))
    b = tape.leaf(np.arange(3.0))
    loss = ad.sum(ad.mul(b, b))
    np.testing.assert_array_equal(ad.grad_wrt_leaf(tape, loss, a), np.zeros(3))


def test_linear_map_gradient():
    tape = ad.Tape()
    a = tape.leaf(np.array([[1.0, -2.0], [0.5, 3.0]]))
    g = ad.grad_wrt_leaf(tape, ad.sum(ad.mul(a, 3.0)), a)
    np.testing.assert_array_equal(g, np.full((2, 2), 3.0))


def test_unknown_leaf_rejected():
    tape, other = ad.Tape(), ad.Tape()
    a = tape.leaf(np.ones(2))
    stray = other.leaf(np.ones(2))
    with pytest.raises(ad.UnknownLeafError):
        ad.grad_wrt_leaf(tape, ad.sum(a), stray)


def test_only_leaves_receive_gradients():
    tape = ad.Tape()
    w = tape.constant(np.ones((3, 3)))
    x = tape.leaf(np.ones((2, 3)))
    y = ad.matmul(x, w)
    assert not w.requires_grad and y.requires_grad
    assert x.id in tape.leaves and w.id not in tape.leaves


def test_tape_replay_is_exact():
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=(2, 4, 8)))
    h = ad.layer_norm(x, np.ones(8), np.zeros(8))
    h = ad.gelu(ad.matmul(h, rng.normal(size=(8, 8))))
    ad.cross_entropy(ad.softmax(h), np.zeros((2, 4), dtype=int))
    replayed = tape.replay()
    for rec, out in zip(tape.records, replayed):
        np.testing.assert_array_equal(rec.output.data, out)


def test_nonfinite_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.mul(np.array([1e308]), 1e10)


# --------------------------------------------------------------- layer norm / gelu


def test_layer_norm_constant_row_gives_bias():
    bias = np.array([0.1, -0.2, 0.3])
    out = ad.layer_norm(np.full((1, 3), 5.0), np.array([2.0, 2.0, 2.0]), bias).data
    np.testing.assert_allclose(out[0], bias, atol=1e-12)


def test_layer_norm_normalizes_rows():
    x = np.random.default_rng(2).normal(3.0, 4.0, size=(5, 16))
    out = ad.layer_norm(x, np.ones(16), np.zeros(16)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)


def test_gelu_origin():
    assert ad.gelu(np.array(0.0)).data == 0.0


def test_gelu_matches_tanh_formula():
    x = 3.0
    ref = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert ad.gelu(np.array(x)).data == pytest.approx(ref, abs=1e-6)


# --------------------------------------------------------------- finite differences

W35 = np.random.default_rng(11).normal(size=(5, 3))
W2533 = np.random.default_rng(12).normal(size=(2, 3, 3, 3))


@pytest.mark.parametrize("name,build,shapes", [
    ("add_broadcast", lambda a, b: ad.sum(ad.mul(ad.add(a, b), W35)), [(5, 3), (3,)]),
    ("sub", lambda a, b: ad.sum(ad.mul(ad.sub(a, b), W35)), [(5, 3), (5, 3)]),
    ("mul", lambda a, b: ad.sum(ad.mul(ad.mul(a, b), W35)), [(5, 3), (5, 1)]),
    ("matmul", lambda a, b: ad.sum(ad.mul(ad.matmul(a, b), W35)), [(5, 4), (4, 3)]),
    ("batched_matmul", lambda a, b: ad.sum(ad.mul(ad.matmul(a, b), W35)), [(2, 5, 4), (4, 3)]),
    ("reshape_transpose", lambda a: ad.sum(ad.mul(ad.reshape(ad.transpose(a, (1, 0)), (5, 3)), W35)),
     [(3, 5)]),
    ("sum_axis", lambda a: ad.sum(ad.mul(ad.sum(a, axis=1), W35[:, 0])), [(5, 3)]),
    ("concat", lambda a, b: ad.sum(ad.mul(ad.concat([a, b], axis=0), W35)), [(2, 3), (3, 3)]),
    ("take", lambda a: ad.sum(ad.mul(ad.take(a, [0, 2, 2, 1, 0]), W35)), [(4, 3)]),
    ("softmax", lambda a: ad.sum(ad.mul(ad.softmax(a), W35)), [(5, 3)]),
    ("cross_entropy", lambda a: ad.cross_entropy(a, [0, 2, 1, 1, 2], [1, 0, 1, 1, 1]), [(5, 3)]),
    ("layer_norm", lambda a, g, b: ad.sum(ad.mul(ad.layer_norm(a, g, b), W35)), [(5, 3), (3,), (3,)]),
    ("gelu", lambda a: ad.sum(ad.mul(ad.gelu(a), W35)), [(5, 3)]),
    ("relu", lambda a: ad.sum(ad.mul(ad.relu(a), W35)), [(5, 3)]),
    ("bce_logits", lambda a: ad.bce_with_logits(a, [[1, 0, 1], [0, 0, 1]]), [(2, 3)]),
    ("conv2d", lambda x, w: ad.sum(ad.mul(ad.gelu(ad.conv2d(x, w, stride=2)), W2533)),
     [(2, 2, 8, 8), (3, 2, 4, 4)]),
])
def test_primitive_gradients_match_central_differences(name, build, shapes):
    check_gradients(build, shapes)


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(4, 8)), rng.normal(size=(8, 8))
    a = ad.softmax(ad.gelu(ad.matmul(x, w))).data
    b = ad.softmax(ad.gelu(ad.matmul(x, w))).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).normal(0, 10, size=(3, 7))
    np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), 1.0, atol=1e-6)
