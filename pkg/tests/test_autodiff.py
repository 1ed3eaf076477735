"""Tensor engine: forward contracts and taped gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronomodal import autodiff as ad
from chronomodal.autodiff import Tape, Tensor, backward, gradient_check
from chronomodal.errors import (ContractError, DegenerateMaskError,
                                NumericError, ShapeError)

RNG = np.random.default_rng(20240811)


def rand_tensor(*shape, requires_grad=False):
    return Tensor(RNG.normal(size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_known_product():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(rand_tensor(2, 3), rand_tensor(2, 2))


def test_matmul_gradient_matches_finite_differences():
    b = rand_tensor(3, 2)
    a = rand_tensor(4, 3)
    err = gradient_check(lambda t: ad.tensor_sum(ad.matmul(t, b)), a)
    assert err < 1e-6


def test_matmul_batched_gradient():
    w = rand_tensor(4, 3)
    x = rand_tensor(2, 5, 4)
    coeff = Tensor(RNG.normal(size=(2, 5, 3)))
    err = gradient_check(lambda t: ad.tensor_sum(ad.matmul(t, w) * coeff), x)
    assert err < 1e-6
    err_w = gradient_check(lambda t: ad.tensor_sum(ad.matmul(x, t) * coeff), w)
    assert err_w < 1e-6


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    out = ad.softmax_last(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_log_two():
    out = ad.softmax_last(Tensor([0.0, np.log(2.0)]))
    assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_masked_uniform():
    out = ad.softmax_last(Tensor([5.0, 5.0, 5.0]), np.array([True, True, False]))
    assert np.array_equal(out.data, [0.5, 0.5, 0.0])


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(DegenerateMaskError):
        ad.softmax_last(rand_tensor(2, 3),
                        np.array([[True, True, True], [False, False, False]]))


def test_softmax_rows_sum_to_one():
    x = rand_tensor(5, 7)
    out = ad.softmax_last(x)
    assert np.all(np.abs(out.data.sum(-1) - 1.0) <= 1e-12)


@given(st.lists(st.integers(min_value=-64, max_value=64), min_size=2, max_size=8),
       st.integers(min_value=-64, max_value=64))
@settings(max_examples=50, deadline=None)
def test_softmax_shift_invariance_bitwise(values, shift):
    # dyadic inputs make x + c exact, so stabilization must cancel c exactly
    x = np.array(values, dtype=np.float64) / 64.0
    c = shift / 64.0
    a = ad.softmax_last(Tensor(x)).data
    b = ad.softmax_last(Tensor(x + c)).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = ad.layer_norm(Tensor([4.2, 4.2, 4.2]), gamma, beta, 1e-5)
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_already_normalized():
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = ad.layer_norm(Tensor([1.0, -1.0]), gamma, beta, 1e-12)
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-9)


def test_layer_norm_gradients():
    x = rand_tensor(3, 5)
    gamma = rand_tensor(5, requires_grad=True)
    beta = rand_tensor(5, requires_grad=True)
    coeff = Tensor(RNG.normal(size=(3, 5)))

    def wrt_x(t):
        return ad.tensor_sum(ad.layer_norm(t, gamma, beta, 1e-5) * coeff)

    assert gradient_check(wrt_x, x) < 1e-6
    assert gradient_check(
        lambda g: ad.tensor_sum(ad.layer_norm(x, g, beta, 1e-5) * coeff), gamma) < 1e-6
    assert gradient_check(
        lambda b: ad.tensor_sum(ad.layer_norm(x, gamma, b, 1e-5) * coeff), beta) < 1e-6


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ContractError):
        ad.layer_norm(rand_tensor(2, 3), Tensor(np.ones(3)), Tensor(np.zeros(3)), 0.0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
        backward(tape, loss)
    assert np.allclose(x.grad, 6.0)


def test_backward_softmax_sum_is_zero_gradient():
    x = rand_tensor(4, requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.softmax_last(x))
        backward(tape, loss)
    assert np.allclose(x.grad, 0.0, atol=1e-12)


def test_backward_two_layer_perceptron_finite_differences():
    w1 = rand_tensor(4, 6)
    b1 = rand_tensor(6)
    w2 = rand_tensor(6, 2)
    x = Tensor(RNG.normal(size=(3, 4)))
    y = Tensor((RNG.random((3, 2)) < 0.5).astype(float))

    def forward(w1_, b1_, w2_):
        hidden = ad.gelu(ad.matmul(x, w1_) + b1_)
        return ad.bce_with_logits(ad.matmul(hidden, w2_), y)

    assert gradient_check(lambda t: forward(t, b1, w2), w1) < 1e-4
    assert gradient_check(lambda t: forward(w1, t, w2), b1) < 1e-4
    assert gradient_check(lambda t: forward(w1, b1, t), w2) < 1e-4


def test_backward_requires_scalar_loss():
    x = rand_tensor(3, requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ContractError):
            backward(tape, y)


def test_backward_fanout_sums_branches():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = x * x + x * 3.0   # d/dx = 2x + 3 = 7
        backward(tape, y)
    assert np.allclose(x.grad, 7.0)


def test_nonfinite_forward_rejected():
    x = Tensor([1.0, 0.0])
    with pytest.raises(NumericError):
        ad.log(x)  # log(0) = -inf


# ---------------------------------------------------------------------------
# gradient_check itself
# ---------------------------------------------------------------------------

def test_gradient_check_linear_is_exact():
    w = Tensor(RNG.normal(size=(5, 1)))
    x = rand_tensor(1, 5)
    err = gradient_check(lambda t: ad.tensor_sum(ad.matmul(t, w)), x)
    assert err < 1e-10


def test_gradient_check_reports_kink():
    # |x| evaluated within one step of the kink: central difference and
    # the subgradient disagree, and the check must surface that.
    x = Tensor([5e-6], requires_grad=True)
    err = gradient_check(lambda t: ad.tensor_sum(ad.abs_(t)), x, step=1e-5)
    assert err > 0.1


def test_gradient_check_rejects_bad_step():
    with pytest.raises(ContractError):
        gradient_check(lambda t: ad.tensor_sum(t), rand_tensor(2), step=0.0)


def _op_cases():
    # constants are drawn once per trial so finite differences see a
    # fixed function of the checked tensor
    def case(name, make):
        return pytest.param(make, id=name)

    return [
        case("add", lambda o, c: lambda t: ad.tensor_sum(ad.add(t, o) * c)),
        case("sub", lambda o, c: lambda t: ad.tensor_sum(ad.sub(o, t) * c)),
        case("mul", lambda o, c: lambda t: ad.tensor_sum(ad.mul(t, o) * c)),
        case("gelu", lambda o, c: lambda t: ad.tensor_sum(ad.gelu(t) * c)),
        case("sigmoid", lambda o, c: lambda t: ad.tensor_sum(ad.sigmoid(t) * c)),
        case("exp", lambda o, c: lambda t: ad.tensor_sum(ad.exp(t) * c)),
        case("mean", lambda o, c: lambda t: ad.tensor_mean(t)),
        case("reshape", lambda o, c: lambda t: ad.tensor_sum(
            ad.reshape(t, (6,)) * ad.reshape(c, (6,)))),
        case("transpose", lambda o, c: lambda t: ad.tensor_sum(
            ad.transpose(t, (1, 0)) * ad.transpose(c, (1, 0)))),
        case("concat", lambda o, c: lambda t: ad.tensor_sum(
            ad.concat([t, o], axis=0) * ad.concat([c, o], axis=0))),
        case("index", lambda o, c: lambda t: ad.tensor_sum(
            ad.index(t, (slice(0, 1),)) * ad.index(c, (slice(0, 1),)))),
        case("layer_norm", lambda o, c: lambda t: ad.tensor_sum(
            ad.layer_norm(t, Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5) * c)),
        case("softmax_last", lambda o, c: lambda t: ad.tensor_sum(
            ad.softmax_last(t) * c)),
        case("rotate_pairs", lambda o, c: lambda t: ad.tensor_sum(
            ad.rotate_pairs(ad.reshape(t, (3, 2)),
                            np.array([[0.3], [1.1], [0.5]]))
            * ad.reshape(c, (3, 2)))),
    ]


@pytest.mark.parametrize("make", _op_cases())
def test_every_op_matches_finite_differences(make):
    for trial in range(10):
        other = rand_tensor(2, 3)
        coeff = rand_tensor(2, 3)
        x = rand_tensor(2, 3, requires_grad=True)
        assert gradient_check(make(other, coeff), x) < 1e-4, f"trial {trial}"
