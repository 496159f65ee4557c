import numpy as np
import pytest

from convmpn.tensor import (
    NumericError,
    ShapeError,
    Tensor,
    debug_checks,
    default_dtype,
    no_grad,
    precision,
    stack_rows,
)
from convmpn import functional as F


def test_default_dtype_is_float32_and_precision_restores():
    assert default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_unsupported_dtype_rejected():
    with pytest.raises(ValueError):
        with precision(np.int32):
            pass


def test_backward_of_simple_expression():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    (a * b + a * 2.0).sum().backward()
    np.testing.assert_allclose(a.grad, [6.0, 7.0, 8.0])
    np.testing.assert_allclose(b.grad, [1.0, 2.0, 3.0])


def test_reused_tensor_accumulates_along_all_paths():
    a = Tensor([3.0], requires_grad=True)
    (a * a * a).sum().backward()
    np.testing.assert_allclose(a.grad, [27.0])


def test_leaf_gradients_accumulate_across_backward_calls():
    a = Tensor([1.0, 1.0], requires_grad=True)
    for _ in range(3):
        (a * 2.0).sum().backward()
    np.testing.assert_allclose(a.grad, [6.0, 6.0])
    a.zero_grad()
    assert a.grad is None


def test_backward_requires_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (a * 2.0).backward()


def test_backward_without_grad_inputs_raises():
    with pytest.raises(ValueError):
        Tensor([1.0]).sum().backward()


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad
    assert out._backward is None


def test_mismatched_shapes_are_rejected():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        Tensor([1.0]) * np.array([1.0, 2.0])
    with pytest.raises(ShapeError):
        Tensor(np.zeros(6)).reshape(4, 2)


def test_getitem_and_reshape_gradients():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    a.reshape(3, 2)[1:, 0].sum().backward()
    np.testing.assert_allclose(a.grad, [[0, 0, 1], [0, 1, 0]])


def test_stack_rows_routes_gradients():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    s = stack_rows([a, b])
    assert s.shape == (2, 2)
    (s[1] * 3.0).sum().backward()
    np.testing.assert_allclose(a.grad, [0.0, 0.0])
    np.testing.assert_allclose(b.grad, [3.0, 3.0])
    with pytest.raises(ShapeError):
        stack_rows([a, Tensor([1.0])])


def test_item_needs_single_element():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_debug_checks_catch_non_finite_values():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with np.errstate(divide="ignore"):
        with debug_checks():
            with pytest.raises(NumericError):
                F.log(x)
        assert not np.isfinite(F.log(x).data).all()
