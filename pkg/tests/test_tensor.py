import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionlm import tensor as T
from fusionlm.errors import DimensionError, NumericalError
from fusionlm.tensor import Tape, Tensor


def fd_grad(f, x, eps=1e-6):
    """Central differences of a scalar numpy function over every entry of x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)

    def test_hand_arithmetic(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_right_identity_bitwise(self):
        a = np.random.default_rng(0).normal(size=(5, 7))
        assert np.array_equal((Tensor(a) @ Tensor(np.eye(7))).data, a)

    def test_backward_against_finite_differences(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.eye(2)
        tape = Tape()
        ta, tb = tape.variable(a), tape.variable(b)
        out = T.sum(ta @ tb)  # dC = ones
        grads = tape.backward(out)
        assert np.allclose(grads[ta], [[1.0, 1.0], [1.0, 1.0]])
        assert np.allclose(grads[ta], fd_grad(lambda x: (x @ b).sum(), a), atol=1e-9)
        assert np.allclose(grads[tb], fd_grad(lambda x: (a @ x).sum(), b), atol=1e-9)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestActivation:
    def test_values(self):
        assert T.activation(Tensor(0.0), "sigmoid").item() == 0.5
        assert T.activation(Tensor(0.0), "tanh").item() == 0.0
        assert T.sigmoid(Tensor(math.log(3.0))).item() == pytest.approx(0.75, abs=1e-15)

    def test_saturates_without_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            y = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert y.tolist() == [0.0, 1.0]

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(Tensor(1.0), "relu")


class TestConcat:
    def test_forward(self):
        assert T.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data.tolist() == [1, 2, 3]

    def test_backward_splits_exactly(self):
        tape = Tape()
        a, b = tape.variable([1.0, 2.0]), tape.variable([3.0])
        out = T.concat([a, b])
        grads = tape.backward(out, seed=np.array([10.0, 20.0, 30.0]))
        assert grads[a].tolist() == [10.0, 20.0]
        assert grads[b].tolist() == [30.0]

    def test_full_scale_widths(self):
        w, v = Tensor(np.zeros(512)), Tensor(np.zeros(512))
        assert T.concat([w, v]).shape == (1024,)

    def test_mismatched_leading_dims(self):
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_split_backward_is_bitwise_identity(self, widths, seed):
        rng = np.random.default_rng(seed)
        tape = Tape()
        parts = [tape.variable(rng.normal(size=(3, w))) for w in widths]
        out = T.concat(parts)
        seed_grad = rng.normal(size=out.shape)
        grads = tape.backward(out, seed=seed_grad)
        lo = 0
        for p, w in zip(parts, widths):
            assert np.array_equal(grads[p], seed_grad[:, lo:lo + w])
            lo += w


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        nll = T.softmax_cross_entropy(Tensor(np.zeros(8)), 3).item()
        assert nll == pytest.approx(math.log(8), abs=1e-15)
        assert nll == pytest.approx(2.0794, abs=1e-4)

    def test_stability(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            nll = T.softmax_cross_entropy(Tensor([1000.0, 0.0]), 0).item()
        assert nll == pytest.approx(0.0, abs=1e-300)

    def test_direct_evaluation(self):
        nll = T.softmax_cross_entropy(Tensor([1.0, 1.0, 2.0]), 2).item()
        expected = -math.log(math.e**2 / (2 * math.e + math.e**2))
        assert nll == pytest.approx(expected, abs=1e-15)
        assert nll == pytest.approx(math.log(1 + 2 / math.e), abs=1e-15)
        assert nll == pytest.approx(0.5514, abs=1e-4)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = np.array([0.3, -1.2, 2.0, 0.0])
        tape = Tape()
        t = tape.variable(logits)
        g = tape.backward(T.softmax_cross_entropy(t, 1))[t]
        p = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(g, p - np.eye(4)[1], atol=1e-15)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_probabilities_sum_to_one(self, logits):
        p = np.exp(T.log_softmax(np.array(logits)))
        assert abs(p.sum() - 1.0) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros(3)), 3)

    def test_weights_zero_rows_contribute_nothing(self):
        logits = np.random.default_rng(1).normal(size=(3, 5))
        tape = Tape()
        t = tape.variable(logits)
        loss = T.softmax_cross_entropy(t, [0, 1, 2], weights=[1.0, 0.0, 1.0])
        g = tape.backward(loss)[t]
        assert np.all(g[1] == 0.0)
        full = T.softmax_cross_entropy(Tensor(logits[[0, 2]]), [0, 2]).item()
        assert loss.item() == pytest.approx(full, abs=1e-14)


class TestTape:
    def test_unused_node_has_exact_zero_gradient(self):
        tape = Tape()
        a, b = tape.variable([1.0, 2.0]), tape.variable([5.0, 6.0])
        _ = T.tanh(b)
        grads = tape.backward(T.sum(a * a))
        assert np.array_equal(grads[b], np.zeros(2))
        assert grads[a].tolist() == [2.0, 4.0]

    def test_backward_visits_nodes_in_reverse_order(self):
        tape = Tape()
        order = []
        x = tape.variable(1.0)
        y = T.tanh(x)
        z = T.sigmoid(y)
        for i, (out, inputs, fn) in enumerate(tape._nodes):
            tape._nodes[i] = (out, inputs, lambda g, fn=fn, i=i: (order.append(i), fn(g))[1])
        tape.backward(z)
        assert order == [1, 0]

    def test_fan_out_accumulates(self):
        tape = Tape()
        x = tape.variable(3.0)
        y = x * x + x  # dy/dx = 2x + 1
        assert tape.backward(y)[x] == pytest.approx(7.0)

    def test_mixing_tapes_is_rejected(self):
        a, b = Tape().variable(1.0), Tape().variable(2.0)
        with pytest.raises(ValueError):
            a + b

    def test_plain_tensors_record_nothing(self):
        tape = Tape()
        Tensor(1.0) + Tensor(2.0)
        assert len(tape) == 0


def _rng_params(seed, **shapes):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(size=s) for k, s in shapes.items()}


OP_CASES = {
    "add_broadcast": (lambda p: T.sum(T.tanh(p["a"] + p["b"])), dict(a=(3, 4), b=(4,))),
    "sub": (lambda p: T.sum(T.tanh(p["a"] - p["b"])), dict(a=(3, 4), b=(3, 1))),
    "mul": (lambda p: T.sum(p["a"] * p["b"]), dict(a=(2, 3), b=(2, 3))),
    "matmul": (lambda p: T.sum(T.tanh(p["a"] @ p["b"])), dict(a=(3, 4), b=(4, 2))),
    "matmul_batched": (lambda p: T.sum(T.tanh(p["a"] @ p["b"])), dict(a=(2, 3, 4), b=(4, 2))),
    "sigmoid": (lambda p: T.sum(T.sigmoid(p["a"]) * p["b"]), dict(a=(5,), b=(5,))),
    "tanh": (lambda p: T.sum(T.tanh(p["a"]) * p["b"]), dict(a=(5,), b=(5,))),
    "concat": (lambda p: T.sum(T.tanh(T.concat([p["a"], p["b"]]))), dict(a=(2, 3), b=(2, 2))),
    "stack": (lambda p: T.sum(T.tanh(T.stack([p["a"], p["b"]], axis=1)) * 1.5), dict(a=(2, 3), b=(2, 3))),
    "getitem": (lambda p: T.sum(T.tanh(p["a"][:, 1:3])) + T.sum(T.tanh(p["a"][0])), dict(a=(3, 4))),
    "reshape": (lambda p: T.sum(T.tanh(T.reshape(p["a"], (6,)))), dict(a=(2, 3))),
    "sum_axis": (lambda p: T.sum(T.tanh(T.sum(p["a"], axis=0))), dict(a=(3, 4))),
    "take_rows": (lambda p: T.sum(T.tanh(T.take_rows(p["a"], [0, 2, 2, 1]))), dict(a=(3, 2))),
    "softmax_xent": (lambda p: T.softmax_cross_entropy(p["a"], [1, 0, 3]), dict(a=(3, 4))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_within_1e6(name):
    f, shapes = OP_CASES[name]
    err = T.grad_check(f, _rng_params(0, **shapes), epsilon=1e-5)
    assert err < 1e-6, f"{name}: {err}"


def test_grad_check_square():
    err = T.grad_check(lambda p: T.sum(p["x"] * p["x"]), {"x": np.array([3.0])}, epsilon=1e-5)
    assert err < 1e-9


def test_grad_check_softmax_classifier():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 4, size=6)

    def f(p):
        return T.softmax_cross_entropy(Tensor(x) @ p["w"] + p["b"], y)

    err = T.grad_check(f, {"w": rng.normal(size=(5, 4)), "b": rng.normal(size=4)}, 1e-5)
    assert err < 1e-6


def test_grad_check_rejects_bad_epsilon_and_nan():
    with pytest.raises(ValueError):
        T.grad_check(lambda p: T.sum(p["x"]), {"x": np.ones(1)}, epsilon=1e-2)
    with pytest.raises(NumericalError):
        T.grad_check(lambda p: T.sum(p["x"] * np.inf), {"x": np.ones(1)}, epsilon=1e-5)
