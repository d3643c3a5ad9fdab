import math

import numpy as np
import pytest

from supernas import autodiff as ad
from supernas.autodiff import Tape, Tensor
from supernas.errors import ContractError, NumericError, ShapeError


def t64(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    x = t64(np.arange(12).reshape(3, 4))
    out = ad.matmul(t64(np.eye(3)), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_softmax_uniform_logits():
    out = ad.softmax(t64(np.zeros((4, 7))))
    np.testing.assert_allclose(out.data, np.full((4, 7), 1 / 7), atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = ad.softmax(t64(rng.normal(scale=50.0, size=(16, 9))))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(16), atol=1e-12)


def test_layernorm_moments():
    rng = np.random.default_rng(1)
    out = ad.layernorm(t64(rng.normal(scale=2.0, size=(32, 24))))
    np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(32), atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=-1), np.ones(32), atol=1e-6)


def test_cross_entropy_confident_correct_logits():
    logits = np.full((4, 5), -1e4)
    logits[np.arange(4), [0, 3, 2, 1]] = 1e4
    loss = ad.cross_entropy(t64(logits), np.array([0, 3, 2, 1]))
    assert loss.item() < 1e-6


def test_cross_entropy_uniform_is_log_k():
    loss = ad.cross_entropy(t64(np.zeros((8, 10))), np.arange(8) % 10)
    assert abs(loss.item() - math.log(10)) < 1e-12


def test_determinism_bitwise():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 8))
    w = rng.normal(size=(8, 3))

    def run():
        with Tape() as tape:
            xt, wt = t64(x, rg=True), t64(w, rg=True)
            loss = ad.sum_all(ad.gelu(ad.matmul(ad.layernorm(xt), wt)))
            tape.backward(loss)
            out = loss.item(), xt.grad.copy(), wt.grad.copy()
            tape.clear()
        return out

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


# ---------------------------------------------------------------------------
# backward basics


def test_backward_quadratic():
    theta = t64([1.0, 2.0], rg=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(theta, theta))
        tape.backward(loss)
    np.testing.assert_allclose(theta.grad, [2.0, 4.0], rtol=1e-12)


def test_backward_constant_loss_zero_grads():
    theta = t64([1.0, 2.0, 3.0], rg=True)
    with Tape() as tape:
        # theta participates but is annihilated; d(loss)/d(theta) = 0
        loss = ad.sum_all(ad.scale(theta, 0.0))
        tape.backward(loss)
    np.testing.assert_array_equal(theta.grad, np.zeros(3))


def test_backward_accumulates_without_reset():
    theta = t64([1.0, 2.0], rg=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(theta, theta))
        tape.backward(loss)
        tape.backward(loss)
    np.testing.assert_allclose(theta.grad, [4.0, 8.0], rtol=1e-12)


def test_tape_clear_resets_grads():
    theta = t64([1.0, 2.0], rg=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(theta, theta))
        tape.backward(loss)
        assert theta.grad is not None
        tape.clear()
    assert theta.grad is None
    assert len(tape) == 0


def test_backward_rejects_non_scalar():
    theta = t64([1.0, 2.0], rg=True)
    with Tape() as tape:
        y = ad.mul(theta, theta)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_shared_input_used_twice():
    x = t64([3.0], rg=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))  # same object twice: d(x^2) = 2x
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


# ---------------------------------------------------------------------------
# shape and numeric guards


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        ad.add(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        ad.mul(t64(np.zeros((2, 3))), t64(np.zeros((2,))))
    with pytest.raises(ShapeError):
        ad.add(t64(np.zeros((2, 3))), Tensor(np.zeros((2, 3)), dtype=np.float32))


def test_non_finite_detection():
    big = t64(np.full((4, 4), 1e308))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            ad.mul(big, big)


# ---------------------------------------------------------------------------
# finite-difference oracles


def test_grad_check_quadratic_form():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(5, 5))
    a = a + a.T
    theta = t64(rng.normal(size=(5, 1)), rg=True)

    def loss_fn():
        return ad.sum_all(ad.mul(theta, ad.matmul(t64(a), theta)))

    report = ad.grad_check(loss_fn, {"theta": theta}, step=1e-6, tol=1e-8)
    assert report.passed, report.entries


def test_grad_check_each_primitive():
    rng = np.random.default_rng(23)
    x = t64(rng.normal(size=(3, 4, 6)), rg=True)
    w = t64(rng.normal(size=(6, 5)), rg=True)
    b = t64(rng.normal(size=(5,)), rg=True)
    s = t64(rng.normal(size=(5,)), rg=True)
    c = t64(rng.normal(size=(3, 4, 6)))
    cases = {
        "matmul": lambda: ad.sum_all(ad.gelu(ad.matmul(x, w))),
        "add_bias": lambda: ad.sum_all(ad.gelu(ad.add(ad.matmul(x, w), b))),
        "mul_trailing": lambda: ad.sum_all(ad.gelu(ad.mul(ad.matmul(x, w), s))),
        "layernorm": lambda: ad.sum_all(ad.mul(ad.layernorm(x), c)),
        "softmax": lambda: ad.sum_all(ad.mul(ad.softmax(x), ad.softmax(ad.scale(x, 0.5)))),
        "gelu": lambda: ad.sum_all(ad.gelu(x)),
        "transpose_reshape": lambda: ad.sum_all(
            ad.gelu(ad.reshape(ad.transpose(x, (2, 0, 1)), (6, 12)))
        ),
        "concat_take": lambda: ad.sum_all(
            ad.gelu(ad.take(ad.concat([x, x], axis=1), 2, axis=1))
        ),
        "broadcast": lambda: ad.sum_all(ad.gelu(ad.broadcast_batch(b, 3))),
    }
    for name, fn in cases.items():
        report = ad.grad_check(fn, {"x": x, "w": w, "b": b, "s": s}, tol=1e-5)
        assert report.passed, (name, report.entries)


def test_grad_check_layernorm_softmax_chain():
    rng = np.random.default_rng(7)
    x = t64(rng.normal(size=(4, 6)), rg=True)
    w = t64(rng.normal(size=(6, 6)), rg=True)

    def fn():
        h = ad.softmax(ad.layernorm(ad.matmul(x, w)))
        return ad.sum_all(ad.mul(h, h))

    report = ad.grad_check(fn, {"x": x, "w": w}, tol=1e-5)
    assert report.passed, report.entries


def test_grad_check_attention_block():
    rng = np.random.default_rng(13)
    q = t64(rng.normal(size=(2, 2, 5, 4)), rg=True)
    k = t64(rng.normal(size=(2, 2, 5, 4)), rg=True)
    v = t64(rng.normal(size=(2, 2, 5, 4)), rg=True)

    def fn():
        return ad.sum_all(ad.gelu(ad.attention(q, k, v)))

    report = ad.grad_check(fn, {"q": q, "k": k, "v": v}, tol=1e-4)
    assert report.passed, report.entries


def test_grad_check_cross_entropy_mlp():
    # random 2-layer MLP, all parameters, against central differences
    rng = np.random.default_rng(29)
    x = np.asarray(rng.normal(size=(6, 8)))
    labels = rng.integers(0, 4, size=6)
    w1 = t64(rng.normal(scale=0.5, size=(8, 10)), rg=True)
    b1 = t64(rng.normal(scale=0.1, size=(10,)), rg=True)
    w2 = t64(rng.normal(scale=0.5, size=(10, 4)), rg=True)
    b2 = t64(rng.normal(scale=0.1, size=(4,)), rg=True)

    def fn():
        h = ad.gelu(ad.add(ad.matmul(t64(x), w1), b1))
        logits = ad.add(ad.matmul(h, w2), b2)
        return ad.cross_entropy(logits, labels)

    report = ad.grad_check(fn, {"w1": w1, "b1": b1, "w2": w2, "b2": b2}, tol=1e-5)
    assert report.passed, report.entries


def test_grad_check_cross_entropy_with_smoothing():
    rng = np.random.default_rng(31)
    logits = t64(rng.normal(size=(5, 6)), rg=True)
    labels = rng.integers(0, 6, size=5)

    def fn():
        return ad.cross_entropy(ad.gelu(logits), labels, label_smoothing=0.1)

    report = ad.grad_check(fn, {"logits": logits}, tol=1e-5)
    assert report.passed, report.entries
