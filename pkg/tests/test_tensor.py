import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check, param
from nmtlm import tensor as T
from nmtlm.tensor import ShapeError, Tape, TapeError, Tensor


def test_matmul_identity_and_hand_sum():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).value, np.eye(2))
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_is_ones_times_bT():
    rng = np.random.default_rng(0)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    with Tape() as tape:
        tape.backward(T.total(T.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.value.T)
    assert check(lambda: T.total(T.matmul(a, b)), [a, b]) < 1e-3


def test_batched_matmul_broadcast_grad():
    rng = np.random.default_rng(1)
    a, w = param(rng, 2, 3, 4), param(rng, 4, 2)
    assert check(lambda: T.total(T.mul(T.matmul(a, w), T.matmul(a, w))), [a, w]) < 1e-3


@pytest.mark.parametrize("logits,mask,expected", [
    ([0.0, 0.0], [1, 1], [0.5, 0.5]),
    ([5.0, -100.0], [1, 0], [1.0, 0.0]),
    ([1.0, 2.0, 3.0], [1, 1, 0], [0.268941, 0.731059, 0.0]),
])
def test_softmax_masked_examples(logits, mask, expected):
    out = T.softmax_masked(Tensor(logits), np.array(mask, dtype=bool)).value
    np.testing.assert_allclose(out, expected, atol=1e-6)
    assert np.all(out[~np.array(mask, dtype=bool)] == 0.0)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError, match="masked"):
        T.softmax_masked(Tensor([[1.0, 2.0], [0.0, 0.0]]), np.array([[1, 0], [0, 0]], dtype=bool))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
       arrays(bool, (3, 5)))
def test_softmax_rows_sum_to_one_and_masked_exact_zero(x, mask):
    mask[:, 0] = True
    p = T.softmax_masked(Tensor(x), mask).value
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p[~mask] == 0.0)


def test_softmax_masked_grad():
    rng = np.random.default_rng(2)
    x = param(rng, 4, 6)
    mask = rng.random((4, 6)) > 0.3
    mask[:, 0] = True
    w = rng.normal(size=(4, 6))
    assert check(lambda: T.total(T.mul(T.softmax_masked(x, mask), w)), [x]) < 1e-3


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(T.layer_norm(Tensor([1.0, 1.0, 1.0]), one, zero).value, 0.0)
    out = T.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.value, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_grad():
    rng = np.random.default_rng(3)
    x, g, b = param(rng, 2, 8), param(rng, 8), param(rng, 8)
    w = rng.normal(size=(2, 8))
    assert check(lambda: T.total(T.mul(T.layer_norm(x, g, b), w)), [x, g, b]) < 1e-3


def test_cross_entropy_uniform_is_ln_v():
    loss = T.cross_entropy_label_smoothed(Tensor(np.zeros((3, 2))), [1, 0, 1], 0.1, pad_id=-1)
    assert float(loss.value) == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_confident_correct_goes_to_zero():
    logits = np.array([[60.0, 0.0, 0.0]])
    loss = T.cross_entropy_label_smoothed(Tensor(logits), [0], 0.0, pad_id=-1)
    assert float(loss.value) < 1e-20


def test_cross_entropy_scalar_oracle():
    # mpmath evaluation of the smoothed cross-entropy, 40 digits
    loss = T.cross_entropy_label_smoothed(Tensor([[2.0, 0.0, 0.0, 0.0]]), [0], 0.1, pad_id=-1)
    assert float(loss.value) == pytest.approx(0.4907529539131311, abs=1e-6)


def test_cross_entropy_pad_rows_contribute_nothing():
    rng = np.random.default_rng(4)
    x = param(rng, 4, 5)
    targets = [3, 0, 1, 0]
    with Tape() as tape:
        tape.backward(T.cross_entropy_label_smoothed(x, targets, 0.1, pad_id=0))
    assert np.all(x.grad[[1, 3]] == 0)
    assert check(lambda: T.cross_entropy_label_smoothed(x, targets, 0.1, 0), [x]) < 1e-3
    only = T.cross_entropy_label_smoothed(Tensor(x.value[[0, 2]]), [3, 1], 0.1, 0)
    full = T.cross_entropy_label_smoothed(Tensor(x.value), targets, 0.1, 0)
    assert float(only.value) == pytest.approx(float(full.value), abs=1e-12)


def test_cross_entropy_all_pad_raises():
    with pytest.raises(ValueError, match="padding"):
        T.cross_entropy_label_smoothed(Tensor(np.zeros((2, 3))), [0, 0], 0.1, pad_id=0)


def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert T.dropout(x, 0.0, rng, True).value is x.value
    assert T.dropout(x, 0.5, rng, False).value is x.value


def test_dropout_mean_preserved():
    out = T.dropout(Tensor(np.ones(100_000)), 0.5, np.random.default_rng(5), True).value
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_grad_uses_same_mask():
    rng = np.random.default_rng(6)
    x = param(rng, 3, 4)
    with Tape() as tape:
        y = T.dropout(x, 0.5, np.random.default_rng(7), True)
        tape.backward(T.total(y))
    np.testing.assert_allclose(x.grad, (y.value != 0) * 2.0)


@pytest.mark.parametrize("op", ["relu", "concat", "gather", "embedding", "transpose", "sub"])
def test_other_primitives_grad(op):
    rng = np.random.default_rng(8)
    a, b = param(rng, 2, 3, 4), param(rng, 2, 3, 4)
    w = rng.normal(size=(2, 6, 4))
    builds = {
        "relu": lambda: T.total(T.mul(T.relu(a), b)),
        "concat": lambda: T.total(T.mul(T.concat([a, b], axis=1), w)),
        "gather": lambda: T.total(T.mul(T.gather_rows(a, [[0, 2, 2], [1, 1, 0]]), b)),
        "embedding": lambda: T.total(T.mul(T.embedding(T.reshape(a, (6, 4)), [[1, 5, 1], [0, 2, 3]]), b)),
        "transpose": lambda: T.total(T.mul(T.transpose(a, (0, 2, 1)), T.transpose(b, (0, 2, 1)))),
        "sub": lambda: T.total(T.mul(T.sub(a, b), a)),
    }
    assert check(builds[op], [a, b]) < 1e-3


def test_tape_replays_in_reverse_and_rejects_second_backward():
    order = []
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
        z = T.total(y)
        assert len(tape) == 2
        for i, (_, _, fn) in enumerate(list(tape._records)):
            tape._records[i] = (tape._records[i][0], tape._records[i][1],
                                (lambda f, k: (lambda g: (order.append(k), f(g))[1]))(fn, i))
        tape.backward(z)
        assert order == [1, 0]
        with pytest.raises(TapeError):
            tape.backward(z)
        # a fresh forward re-arms the tape
        z2 = T.total(T.scale(x, 3.0))
        x.grad = None
        tape.backward(z2)
    np.testing.assert_allclose(x.grad, [3.0, 3.0])


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    y = T.scale(x, 2.0)
    assert not y.requires_grad


def test_forward_bit_identical_for_same_seed():
    def run():
        rng = T.rng_stream(11, "dropout", 3)
        x = Tensor(T.rng_stream(11, "data").normal(size=(4, 8)))
        return T.dropout(T.softmax_masked(x, np.ones((4, 8), bool)), 0.1, rng, True).value
    assert np.array_equal(run(), run())
    assert not np.array_equal(T.rng_stream(1, "a").random(4), T.rng_stream(1, "b").random(4))
