"""Oracle tests for the tensor/tape core: every differentiable primitive is
checked against central finite differences at f64."""

import numpy as np
import pytest

from rqlib import autodiff as ad
from rqlib.errors import (
    DimensionError,
    DivergenceError,
    EvaluationError,
    InvalidMaskError,
    ValidationError,
)

RNG = np.random.default_rng(1234)


def test_matmul_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(ad.constant(np.eye(2)), ad.constant(x))
    np.testing.assert_array_equal(out.data, x)
    out = ad.matmul(ad.constant(x), ad.constant(np.eye(2)))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        ad.matmul(ad.constant(np.zeros((3, 4))), ad.constant(np.zeros((5, 2))))


def test_matmul_gradients_match_finite_differences():
    a = ad.Tensor(RNG.normal(size=(3, 4)))
    b = RNG.normal(size=(4, 5))
    w = RNG.normal(size=(3, 5))
    err = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.matmul(t, ad.constant(b)), ad.constant(w))), a)
    assert err < 1e-6
    bt = ad.Tensor(RNG.normal(size=(4, 5)))
    a2 = RNG.normal(size=(3, 4))
    err = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.matmul(ad.constant(a2), t), ad.constant(w))), bt)
    assert err < 1e-6


def test_matmul_batched_gradients():
    a = ad.Tensor(RNG.normal(size=(2, 3, 4)))
    b = RNG.normal(size=(4, 5))
    err = ad.grad_check(lambda t: ad.sum_all(ad.matmul(t, ad.constant(b))), a)
    assert err < 1e-6
    bt = ad.Tensor(RNG.normal(size=(4, 5)))
    err = ad.grad_check(lambda t: ad.sum_all(ad.matmul(ad.constant(a.data), t)), bt)
    assert err < 1e-6
    b4 = ad.Tensor(RNG.normal(size=(2, 2, 4, 3)))
    a4 = RNG.normal(size=(2, 2, 5, 4))
    err = ad.grad_check(lambda t: ad.sum_all(ad.matmul(ad.constant(a4), t)), b4)
    assert err < 1e-6


def test_masked_softmax_uniform_row():
    out = ad.masked_softmax(ad.constant(np.zeros((1, 3))))
    np.testing.assert_allclose(out.data, np.full((1, 3), 1.0 / 3.0))


def test_masked_softmax_forced_entry():
    out = ad.masked_softmax(ad.constant(np.array([[5.0, 1.0]])),
                            np.array([True, False]))
    np.testing.assert_array_equal(out.data, np.array([[1.0, 0.0]]))


def test_masked_softmax_rows_sum_to_one_and_masked_exact_zero():
    for _ in range(20):
        x = ad.constant(RNG.normal(size=(4, 9)) * 10)
        mask = RNG.random((4, 9)) < 0.7
        mask[:, 0] = True
        p = ad.masked_softmax(x, mask).data
        assert np.abs(p.sum(axis=-1) - 1.0).max() <= 1e-12
        assert (p[~np.broadcast_to(mask, p.shape)] == 0.0).all()
        assert (p[np.broadcast_to(mask, p.shape)] > 0.0).all()


def test_masked_softmax_fully_masked_row_rejected():
    with pytest.raises(InvalidMaskError):
        ad.masked_softmax(ad.constant(np.zeros((2, 3))),
                          np.array([[True, True, True], [False, False, False]]))


def test_masked_softmax_jacobian():
    mask = np.array([True] * 6 + [False, True])
    x = ad.Tensor(RNG.normal(size=(1, 8)))
    w = RNG.normal(size=(1, 8))
    err = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.masked_softmax(t, mask), ad.constant(w))), x)
    assert err < 1e-6


def test_layer_norm_constant_row_is_bias():
    x = ad.constant(np.full((2, 5), 3.7))
    out = ad.layer_norm(x, ad.constant(np.ones(5)), ad.constant(np.zeros(5)), 1e-5)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_already_normalized():
    x = ad.constant(np.array([[1.0, -1.0]]))
    out = ad.layer_norm(x, ad.constant(np.ones(2)), ad.constant(np.zeros(2)), 1e-15)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-7)


def test_layer_norm_gradients():
    gain = ad.Tensor(RNG.normal(size=6))
    bias = ad.Tensor(RNG.normal(size=6))
    x = ad.Tensor(RNG.normal(size=(2, 6)))
    w = RNG.normal(size=(2, 6))

    def loss_x(t):
        return ad.sum_all(ad.mul(ad.layer_norm(t, gain.detach(), bias.detach(), 1e-5),
                                 ad.constant(w)))

    assert ad.grad_check(loss_x, x) < 1e-6

    def loss_gain(t):
        return ad.sum_all(ad.mul(ad.layer_norm(ad.constant(x.data), t, bias.detach(),
                                               1e-5), ad.constant(w)))

    assert ad.grad_check(loss_gain, gain) < 1e-6

    def loss_bias(t):
        return ad.sum_all(ad.mul(ad.layer_norm(ad.constant(x.data), gain.detach(), t,
                                               1e-5), ad.constant(w)))

    assert ad.grad_check(loss_bias, bias) < 1e-6


def test_gelu_gradient():
    x = ad.Tensor(RNG.normal(size=(3, 7)))
    assert ad.grad_check(lambda t: ad.sum_all(ad.gelu(t)), x) < 1e-6


def test_cross_entropy_one_hot_gap():
    # -log sigmoid(10) for a one-hot target on the larger logit
    loss = ad.cross_entropy_soft(ad.constant(np.array([[10.0, 0.0]])),
                                 np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(loss.item(), np.log1p(np.exp(-10.0)), rtol=1e-12)
    assert abs(loss.item() - 4.54e-5) < 1e-7


def test_cross_entropy_uniform_logits_any_target():
    for K in (2, 5, 16):
        t = RNG.random((3, K))
        t /= t.sum(axis=1, keepdims=True)
        loss = ad.cross_entropy_soft(ad.constant(np.zeros((3, K))), t)
        np.testing.assert_allclose(loss.item(), np.log(K), rtol=1e-12)


def test_cross_entropy_rejects_malformed_targets():
    logits = ad.constant(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        ad.cross_entropy_soft(logits, np.array([[0.5, 0.2, 0.2]]))
    with pytest.raises(ValidationError):
        ad.cross_entropy_soft(logits, np.array([[1.5, -0.5, 0.0]]))


def test_cross_entropy_gradient():
    logits = ad.Tensor(RNG.normal(size=(4, 16)))
    t = RNG.random((4, 16))
    t /= t.sum(axis=1, keepdims=True)
    assert ad.grad_check(lambda x: ad.cross_entropy_soft(x, t), logits) < 1e-6


def test_backward_accumulates_per_use():
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    tape = ad.Tape()
    with ad.recording(tape):
        y = ad.sum_all(ad.add(x, x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [2.0])


def test_tape_clear_and_reuse():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    tape = ad.Tape()
    with ad.recording(tape):
        y = ad.sum_all(ad.mul(x, x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [4.0])
    tape.clear()
    assert len(tape) == 0
    x.zero_grad()
    with ad.recording(tape):
        y = ad.sum_all(ad.mul(x, x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [4.0])


def test_structural_op_gradients():
    x = ad.Tensor(RNG.normal(size=(2, 3, 4)))
    w = RNG.normal(size=(4, 2, 3))

    def f(t):
        return ad.sum_all(ad.mul(ad.transpose(t, (2, 0, 1)), ad.constant(w)))

    assert ad.grad_check(f, x) < 1e-6

    w2 = RNG.normal(size=(2, 7))

    def g(t):
        parts = [ad.narrow(t, 1, 0, 1), ad.narrow(t, 1, 1, 2)]
        joined = ad.concat([parts[1], parts[0]], axis=1)
        flat = ad.reshape(joined, (2, 12))
        return ad.sum_all(ad.mul(ad.narrow(flat, 1, 0, 7), ad.constant(w2)))

    x2 = ad.Tensor(RNG.normal(size=(2, 3, 4)))
    assert ad.grad_check(g, x2) < 1e-6


def test_embedding_gather_and_scatter_grad():
    table = ad.Tensor(RNG.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    w = RNG.normal(size=(4, 3))
    err = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.embedding(t, idx), ad.constant(w))), table)
    assert err < 1e-6


def test_dropout_identity_at_zero_rate():
    x = ad.Tensor(RNG.normal(size=(3, 3)))
    out = ad.dropout(x, 0.0, np.random.default_rng(0))
    assert out is x


def test_adamw_decay_only_scales():
    p = ad.parameter(np.array([2.0, -4.0]))
    opt = ad.AdamW({"p": p}, lr=1.0, weight_decay=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, [1.8, -3.6], rtol=1e-12)


def test_adamw_single_step_hand_computed():
    # from zero state: m=(1-b1)g, v=(1-b2)g^2, bias-corrected to g and g^2,
    # so the update is -lr * g / (|g| + eps)
    g = 0.37
    lr, eps = 0.01, 1e-8
    p = ad.parameter(np.array([1.0]))
    opt = ad.AdamW({"p": p}, lr=lr, beta1=0.9, beta2=0.95, eps=eps, weight_decay=0.0)
    p.grad = np.array([g])
    opt.step()
    expected = 1.0 - lr * g / (abs(g) + eps)
    np.testing.assert_allclose(p.data, [expected], rtol=1e-12)


def test_adamw_deterministic():
    def run():
        p = ad.parameter(np.array([1.0, 2.0]))
        opt = ad.AdamW({"p": p}, lr=0.1, weight_decay=0.01)
        for i in range(3):
            p.grad = np.array([0.5, -1.0]) * (i + 1)
            opt.step()
            p.zero_grad()
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_adamw_nonfinite_gradient_names_parameter():
    p = ad.parameter(np.array([1.0]))
    opt = ad.AdamW({"weights": p}, lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="weights"):
        opt.step()


def test_grad_check_square():
    x = ad.Tensor(np.array([3.0]))
    err = ad.grad_check(lambda t: ad.sum_all(ad.mul(t, t)), x)
    assert err < 1e-9


def test_grad_check_rejects_nonfinite():
    x = ad.Tensor(np.array([1.0]))

    def f(t):
        return ad.sum_all(ad.mul(t, ad.constant(np.array([np.inf]))))

    with pytest.raises(EvaluationError):
        ad.grad_check(f, x)
