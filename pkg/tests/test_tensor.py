import math

import numpy as np
import pytest

from nora import tensor as T
from nora.errors import ContractError, DimensionError, NumericError
from nora.gradcheck import check
from nora.tensor import Parameter, Tensor


def test_matmul_hand_cases():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((eye @ m).data, m.data)
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_sum_product_gradient_matches_fd(rng):
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))
    assert check(lambda x, y: (x * y).sum(), [a, b]) < 1e-6


def test_abs_subgradient_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = T.absolute(x)
    np.testing.assert_array_equal(y.data, [1.0, 0.0, 2.0])
    y.backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_power_zero_is_ones(rng):
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(T.power(Tensor(x), 0).data, np.ones((4, 3)))


def test_power_rejects_fractional():
    with pytest.raises(ContractError):
        T.power(Tensor([1.0]), 0.5)


def test_exp_gradient_analytic():
    x = Tensor([0.0, 1.0], requires_grad=True)
    T.exp(x).sum().backward()
    assert abs(x.grad[0] - 1.0) < 1e-12
    assert abs(x.grad[1] - math.e) < 1e-12


def test_weight_gradient_hand_case():
    w = Tensor([[2.0]], requires_grad=True)
    x = Tensor([[3.0]])
    (w * x).sum().backward()
    np.testing.assert_array_equal(w.grad, [[3.0]])


def test_two_layer_composition_fd(rng):
    x = rng.uniform(-2, 2, (5, 3))
    w1, w2 = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))

    def f(x, w1, w2):
        return T.tanh(T.matmul(T.tanh(T.matmul(x, w1)), w2)).sum()

    assert check(f, [x, w1, w2]) < 1e-6


def test_backward_on_detached_raises():
    with pytest.raises(ContractError):
        Tensor([1.0]).sum().backward()
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (w * 2.0).detach().sum().backward()


def test_backward_non_scalar_raises():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (w * 2.0).backward()


def test_gradients_accumulate_without_reset():
    w = Tensor([1.0, 2.0], requires_grad=True)
    (w * 3.0).sum().backward()
    (w * 3.0).sum().backward()
    np.testing.assert_array_equal(w.grad, [6.0, 6.0])


def test_backward_deterministic(rng):
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(4, 3))
    grads = []
    for _ in range(2):
        wt = Tensor(w, requires_grad=True)
        T.cross_entropy(T.gelu(Tensor(x) @ wt), np.array([0, 1, 2, 0, 1, 2])).backward()
        grads.append(wt.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_ops_do_not_mutate_inputs(rng):
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))
    a0, b0 = a.copy(), b.copy()
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out = T.softmax(T.layer_norm(ta * tb + ta @ tb), axis=-1).sum()
    out.backward()
    np.testing.assert_array_equal(ta.data, a0)
    np.testing.assert_array_equal(tb.data, b0)


def test_division_by_zero_names_index():
    with pytest.raises(NumericError) as err:
        T.div(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 0.0, 1.0]))
    assert err.value.index is not None


def test_log_of_negative_is_numeric_error():
    with pytest.raises(NumericError):
        T.log(Tensor([-1.0]))


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = (w * 2.0).sum()
    with pytest.raises(ContractError):
        y.backward()


def test_broadcast_gradient_unbroadcasts(rng):
    x = rng.normal(size=(4, 3))
    bias = rng.normal(size=(3,))
    assert check(lambda x, b: T.tanh(x + b).sum(), [x, bias]) < 1e-6


def test_trailing_broadcast_only():
    with pytest.raises(DimensionError):
        Tensor(np.ones((3, 2))) + Tensor(np.ones((3, 1, 4)))


def test_parameter_trainable_alias():
    p = Parameter(np.ones(2))
    assert p.trainable and p.requires_grad
    p.grad = np.ones(2)
    p.trainable = False
    assert not p.requires_grad and p.grad is None


def test_cross_entropy_value():
    logits = Tensor([[0.0, 0.0]])
    assert abs(T.cross_entropy(logits, [1]).item() - math.log(2.0)) < 1e-15
