import math

import numpy as np
import pytest

from spikeseq import autodiff as ad
from conftest import numeric_grad, rel_err


def _check_unary(op_fn, np_fn, x0, tol=1e-6):
    x = ad.Tensor(x0.copy(), requires_grad=True)
    w = np.random.default_rng(0).normal(size=x0.shape)
    out = op_fn(x)
    loss = ad.tsum(out * ad.Tensor(w))
    loss.backward()
    fd = numeric_grad(lambda: float((np_fn(x.data) * w).sum()), x.data)
    assert rel_err(x.grad, fd) < tol


def test_add_backward_distributes():
    a = ad.Tensor([1.0, 2.0], requires_grad=True)
    b = ad.Tensor([3.0, 4.0], requires_grad=True)
    out = a + b
    assert np.allclose(out.data, [4.0, 6.0])
    ad.tsum(out).backward()
    assert np.allclose(a.grad, [1.0, 1.0])
    assert np.allclose(b.grad, [1.0, 1.0])


def test_matmul_1x1_product_rule():
    a = ad.Tensor([[2.0]], requires_grad=True)
    b = ad.Tensor([[3.0]], requires_grad=True)
    out = a @ b
    assert out.data[0, 0] == 6.0
    ad.tsum(out).backward()
    assert a.grad[0, 0] == 3.0
    assert b.grad[0, 0] == 2.0


def test_sum_grad_is_ones():
    x = ad.Tensor([1.0, 5.0, -2.0], requires_grad=True)
    ad.tsum(x).backward()
    assert np.allclose(x.grad, [1.0, 1.0, 1.0])


def test_hadamard_square_grad():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.tsum(x * x).backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_non_scalar_loss_rejected():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        x.backward()


def test_grad_accumulates_over_reuse():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    y = x + x
    ad.tsum(y).backward()
    assert np.allclose(x.grad, [2.0, 2.0])


def test_broadcast_add_unbroadcasts(rng):
    a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(4,)), requires_grad=True)
    ad.tsum(a + b).backward()
    assert a.grad.shape == (3, 4)
    assert np.allclose(b.grad, 3.0 * np.ones(4))


@pytest.mark.parametrize("op,ref", [
    (ad.exp, np.exp),
    (ad.logistic, lambda x: 1 / (1 + np.exp(-x))),
    (ad.erf, None),
    (ad.relu, lambda x: np.maximum(x, 0)),
])
def test_elementwise_fd(op, ref, rng):
    x0 = rng.normal(size=7)
    if ref is None:
        from scipy.special import erf as ref
    _check_unary(op, ref, x0)


def test_log_fd(rng):
    x0 = rng.random(7) + 0.5
    _check_unary(ad.log, np.log, x0)


def test_matmul_fd(rng):
    a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(3, 2))
    ad.tsum((a @ b) * ad.Tensor(w)).backward()
    fd_a = numeric_grad(lambda: float(((a.data @ b.data) * w).sum()), a.data)
    fd_b = numeric_grad(lambda: float(((a.data @ b.data) * w).sum()), b.data)
    assert rel_err(a.grad, fd_a) < 1e-6
    assert rel_err(b.grad, fd_b) < 1e-6


def test_reshape_transpose_concat_slice(rng):
    x = ad.Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    y = ad.transpose(ad.reshape(x, (4, 3)))
    z = ad.concat([y, y], axis=1)
    out = z[:, 1:5]
    w = rng.normal(size=out.shape)
    ad.tsum(out * ad.Tensor(w)).backward()

    def f():
        yy = x.data.reshape(4, 3).T
        zz = np.concatenate([yy, yy], axis=1)
        return float((zz[:, 1:5] * w).sum())

    assert rel_err(x.grad, numeric_grad(f, x.data)) < 1e-6


def test_mean_axes(rng):
    x = ad.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(2, 4))
    ad.tsum(ad.tmean(x, axis=1) * ad.Tensor(w)).backward()
    fd = numeric_grad(lambda: float((x.data.mean(axis=1) * w).sum()), x.data)
    assert rel_err(x.grad, fd) < 1e-6


def test_layer_norm_constant_input_is_zero():
    x = ad.Tensor(np.full((2, 5), 3.7))
    out = ad.layer_norm(x, ad.Tensor(np.ones(5)), ad.Tensor(np.zeros(5)))
    assert np.abs(out.data).max() < 1e-10


def test_layer_norm_fd(rng):
    x = ad.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    gamma = ad.Tensor(rng.normal(size=5), requires_grad=True)
    beta = ad.Tensor(rng.normal(size=5), requires_grad=True)
    w = rng.normal(size=(3, 5))

    def f():
        mu = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)
        xh = (x.data - mu) / np.sqrt(var + 1e-5)
        return float(((gamma.data * xh + beta.data) * w).sum())

    ad.tsum(ad.layer_norm(x, gamma, beta) * ad.Tensor(w)).backward()
    for t in (x, gamma, beta):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-5


def test_batch_norm_train_fd(rng):
    st = ad.BatchNormState(4)
    x = ad.Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
    gamma = ad.Tensor(rng.normal(size=4), requires_grad=True)
    beta = ad.Tensor(rng.normal(size=4), requires_grad=True)
    w = rng.normal(size=(3, 5, 4))

    def f():
        mu = x.data.mean(axis=(0, 1))
        var = x.data.var(axis=(0, 1))
        xh = (x.data - mu) / np.sqrt(var + st.eps)
        return float(((gamma.data * xh + beta.data) * w).sum())

    ad.tsum(ad.batch_norm(x, gamma, beta, st, training=True) * ad.Tensor(w)).backward()
    for t in (x, gamma, beta):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-5


def test_batch_norm_eval_uses_running_stats(rng):
    st = ad.BatchNormState(2)
    gamma, beta = ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
    x = ad.Tensor(rng.normal(size=(4, 3, 2)) + 5.0)
    ad.batch_norm(x, gamma, beta, st, training=True)
    assert st.running_mean.max() > 0.1  # stats moved toward the batch
    y1 = ad.batch_norm(x, gamma, beta, st, training=False)
    mean_before = st.running_mean.copy()
    y2 = ad.batch_norm(x, gamma, beta, st, training=False)
    assert np.array_equal(st.running_mean, mean_before)
    assert np.allclose(y1.data, y2.data)


def test_dropout_eval_identity(rng):
    x = ad.Tensor(rng.normal(size=(5, 5)))
    out = ad.dropout(x, 0.5, training=False, rng=rng)
    assert out is x


def test_dropout_train_mask_scales(rng):
    x = ad.Tensor(np.ones((200, 50)), requires_grad=True)
    out = ad.dropout(x, 0.25, training=True, rng=rng)
    vals = np.unique(out.data)
    assert set(np.round(vals, 6)) <= {0.0, round(1 / 0.75, 6)}
    assert abs(out.data.mean() - 1.0) < 0.05


def test_softmax_ce_uniform_logits_is_log_classes():
    logits = ad.Tensor(np.zeros((4, 10)))
    loss = ad.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
    assert abs(float(loss.data) - math.log(10)) < 1e-12


def test_softmax_ce_fd(rng):
    logits = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, 5)

    def f():
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return float(-np.log(p[np.arange(5), labels]).mean())

    ad.softmax_cross_entropy(logits, labels).backward()
    assert rel_err(logits.grad, numeric_grad(f, logits.data)) < 1e-6


def test_fft_roundtrip(rng):
    x = ad.Tensor(rng.normal(size=16))
    re, im = ad.rfft(x)
    back = ad.irfft(re, im, 16)
    assert np.abs(back.data - x.data).max() < 1e-10


@pytest.mark.parametrize("n", [8, 9, 15])
def test_rfft_irfft_fd(n, rng):
    x = ad.Tensor(rng.normal(size=n), requires_grad=True)
    wr = rng.normal(size=n // 2 + 1)
    wi = rng.normal(size=n // 2 + 1)
    re, im = ad.rfft(x, n=n)
    ad.tsum(re * ad.Tensor(wr) + im * ad.Tensor(wi)).backward()

    def f():
        X = np.fft.rfft(x.data, n)
        return float((X.real * wr).sum() + (X.imag * wi).sum())

    assert rel_err(x.grad, numeric_grad(f, x.data)) < 1e-6

    re = ad.Tensor(rng.normal(size=n // 2 + 1), requires_grad=True)
    im = ad.Tensor(rng.normal(size=n // 2 + 1), requires_grad=True)
    w = rng.normal(size=n)
    ad.tsum(ad.irfft(re, im, n) * ad.Tensor(w)).backward()

    def g():
        return float((np.fft.irfft(re.data + 1j * im.data, n) * w).sum())

    assert rel_err(re.grad, numeric_grad(g, re.data)) < 1e-6
    assert rel_err(im.grad, numeric_grad(g, im.data)) < 1e-6


def test_no_grad_blocks_graph():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert y._parents == ()
