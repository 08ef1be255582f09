"""Autodiff engine: gradients of every op against central finite differences."""

import numpy as np
import pytest

from ctf_retrieval import tensor as T
from ctf_retrieval.errors import InvalidInputError
from ctf_retrieval.tensor import Tensor, finite_diff_check, grad


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_quadratic_gradient():
    x = Tensor(3.0, requires_grad=True)
    (g,) = grad(x * x, [x])
    assert g == 6.0


def test_quadratic_finite_diff_is_tight():
    x = Tensor(np.array([3.0, -1.5, 0.25]), requires_grad=True)
    err = finite_diff_check(lambda: (x * x).sum(), [x], 1e-5)
    assert err <= 1e-9


def test_epsilon_must_be_positive():
    x = Tensor(1.0, requires_grad=True)
    with pytest.raises(InvalidInputError):
        finite_diff_check(lambda: x * x, [x], 0.0)


def test_non_scalar_output_rejected(rng):
    x = leaf(rng, 3)
    with pytest.raises(InvalidInputError):
        grad(x * 2.0, [x])


def test_disconnected_parameter_gets_zero(rng):
    x, y = leaf(rng, 4), leaf(rng, 2, 2)
    gx, gy = grad((x * x).sum(), [x, y])
    np.testing.assert_array_equal(gy, np.zeros((2, 2)))
    np.testing.assert_allclose(gx, 2 * x.data)


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 3)
    y = x * 2.0
    (g,) = grad((y * y + y).sum(), [x])
    np.testing.assert_allclose(g, 8 * x.data + 2.0)


def test_sum_of_layer_norm_matches_finite_diff(rng):
    x = leaf(rng, 3, 7)
    gain = Tensor(rng.normal(size=7), requires_grad=True)
    bias = Tensor(rng.normal(size=7), requires_grad=True)
    err = finite_diff_check(lambda: T.layer_norm(x, gain, bias).sum(), [x, gain, bias])
    assert err <= 1e-4


OPS = {
    "add_broadcast": lambda a, b: (a + b[0]).sum(),
    "mul_broadcast": lambda a, b: (a * b[:1]).sum(),
    "matmul_batched": lambda a, b: ((a.reshape(2, 3, 4) @ b[:4, :3]) * 0.7).sum(),
    "exp_log": lambda a, b: T.log(T.exp(a) + 1.0).sum(),
    "gelu": lambda a, b: (T.gelu(a) * b).sum(),
    "softmax": lambda a, b: (T.softmax(a, axis=-1) * b).sum(),
    "logsumexp": lambda a, b: (T.logsumexp(a, axis=-1) * b[:, 0]).sum(),
    "mean": lambda a, b: (a.mean(axis=0) * b[0]).sum(),
    "transpose": lambda a, b: (a.transpose(1, 0) @ b).sum(),
    "getitem_fancy": lambda a, b: (a[np.array([0, 2, 2, 5])] * b[:4]).sum(),
    "getitem_window": lambda a, b: a[np.array([[0, 1], [1, 2], [2, 3]]), :].sum(),
    "concat": lambda a, b: (T.concat([a, b], axis=0) * T.concat([b, a], axis=0)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    a, b = leaf(rng, 6, 4), leaf(rng, 6, 4)
    err = finite_diff_check(lambda: OPS[name](a, b), [a, b])
    assert err <= 1e-4, name


def test_logsumexp_ignores_minus_inf_entries(rng):
    a = leaf(rng, 2, 3)
    mask = np.array([[0.0, -np.inf, 0.0], [0.0, 0.0, -np.inf]])
    out = T.logsumexp(a + mask, axis=1)
    expected = [np.log(np.exp(a.data[0, 0]) + np.exp(a.data[0, 2])),
                np.log(np.exp(a.data[1, 0]) + np.exp(a.data[1, 1]))]
    np.testing.assert_allclose(out.data, expected, rtol=1e-14)
    (g,) = grad(out.sum(), [a])
    assert g[0, 1] == 0.0 and g[1, 2] == 0.0
    assert np.all(np.isfinite(g))


def test_no_grad_records_nothing(rng):
    a = leaf(rng, 3)
    with T.no_grad():
        out = a * 2.0
    assert not out.requires_grad and out._parents == ()


def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
            T.log(Tensor(np.array([0.0, 1.0])))
    finally:
        T.set_debug(False)
