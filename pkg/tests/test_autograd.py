import numpy as np
import pytest

from retro import ops
from retro.autograd import Parameter, Tape, TapeError, Tensor, backward


def test_nothing_recorded_outside_a_tape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ops.mul(x, x)
    assert y.node_id is None and not y.requires_grad


def test_nothing_recorded_without_grad_inputs():
    with Tape() as tape:
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert tape.nodes == []


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(TapeError, match="scalar"):
        backward(tape, y)


def test_second_backward_on_same_tape_fails():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    backward(tape, loss)
    with pytest.raises(TapeError, match="already"):
        backward(tape, loss)


def test_loss_from_another_tape_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as first:
        loss = ops.sum(x)
    with pytest.raises(TapeError, match="not recorded"):
        backward(Tape(), loss)
    backward(first, loss)


def test_reused_tensor_accumulates_both_paths():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, x), ops.scale(x, 3.0)))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_frozen_parameter_grad_is_never_materialised():
    w = Parameter(Tensor(np.ones((2, 2)), requires_grad=True), "w")
    v = Parameter(Tensor(np.ones((2, 2)), requires_grad=True), "v")
    w.trainable = False
    with Tape() as tape:
        loss = ops.sum(ops.mul(w.tensor, v.tensor))
    backward(tape, loss)
    assert w.grad is None
    np.testing.assert_array_equal(v.grad, np.ones((2, 2)))


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum(ops.scale(x, 5.0))
        backward(tape, loss)
    np.testing.assert_allclose(x.grad, [10.0])


def test_storage_is_float32():
    assert Tensor(np.arange(3, dtype=np.float64)).data.dtype == np.float32
    assert Tensor(1.5).shape == (1,)


def test_operator_sugar_matches_ops():
    a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 5.0]))
    np.testing.assert_array_equal((a + b).data, [4, 7])
    np.testing.assert_array_equal((a - b).data, [-2, -3])
    np.testing.assert_array_equal((a * b).data, [3, 10])
    np.testing.assert_array_equal((-a).data, [-1, -2])
    assert a.sum().item() == 3.0 and b.mean().item() == 4.0
