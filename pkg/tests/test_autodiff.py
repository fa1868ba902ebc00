"""Finite-difference checks for the reverse-mode core.

Every op used by the models is checked here in float64 so that failures in
higher-level gradient tests point at the model code, not the tape.
"""

import numpy as np
import pytest

from tactgen import autodiff as ad
from tactgen import nn


def numerical_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_grad(build_loss, *arrays, tol=1e-6):
    tensors = [ad.Parameter(a) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()

    def reeval():
        return build_loss(*[ad.Tensor(t.data) for t in tensors]).item()

    for t, a in zip(tensors, arrays):
        num = numerical_grad(reeval, a)
        ana = t.grad
        assert ana is not None
        err = np.abs(ana - num) / np.maximum.reduce([np.abs(ana), np.abs(num), np.full_like(num, 1e-4)])
        assert err.max() < tol, f"max rel err {err.max()}"


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape).astype(np.float64)


@pytest.mark.parametrize("op", [
    lambda a, b: (a * b + a).sum(),
    lambda a, b: ((a - b) * (a - b)).mean(),
    lambda a, b: (a / (b * b + 1.0)).sum(),
])
def test_elementwise_ops(op):
    check_grad(op, rand(3, 4, seed=1), rand(3, 4, seed=2))


def test_matmul():
    check_grad(lambda a, b: (a @ b).sum(), rand(3, 4, seed=1), rand(4, 5, seed=2))


def test_broadcast_add_mul():
    a, b = rand(2, 3, 4, seed=3), rand(4, seed=4)
    check_grad(lambda x, y: (x * y + y).sum(), a, b)


def test_batched_matmul():
    a, b = rand(2, 3, 4, 5, seed=5), rand(2, 3, 5, 6, seed=6)
    check_grad(lambda x, y: (x @ y).sum(), a, b, tol=5e-6)


def test_broadcast_matmul():
    a, b = rand(2, 3, 4, 5, seed=7), rand(5, 6, seed=8)
    check_grad(lambda x, y: ((x @ y) ** 2.0).sum(), a, b)


@pytest.mark.parametrize("fn", [ad.exp, ad.tanh, ad.sigmoid, ad.silu, ad.gelu])
def test_unary_smooth(fn):
    a = rand(3, 5, seed=9)
    check_grad(lambda x: fn(x).sum(), a)


def test_log_sqrt():
    a = np.abs(rand(3, 4, seed=10)) + 0.5
    check_grad(lambda x: ad.log(x).sum(), a)
    check_grad(lambda x: ad.sqrt(x).sum(), a)


def test_softmax_logsoftmax():
    a = rand(2, 3, 7, seed=11)
    w = rand(2, 3, 7, seed=12)
    check_grad(lambda x: (ad.softmax(x, axis=-1) * w).sum(), a)
    check_grad(lambda x: (ad.log_softmax(x, axis=-1) * w).sum(), a)


def test_layer_norm():
    a = rand(4, 6, seed=13)
    w = rand(4, 6, seed=14)
    check_grad(lambda x: (ad.layer_norm(x) * w).sum(), a, tol=1e-5)


def test_reductions_axes():
    a = rand(3, 4, 5, seed=15)
    check_grad(lambda x: (x.sum(axis=1) ** 2.0).sum(), a)
    check_grad(lambda x: (x.mean(axis=(0, 2)) ** 2.0).sum(), a)
    check_grad(lambda x: x.mean(), a)


def test_reshape_transpose_concat_take():
    a, b = rand(2, 6, seed=16), rand(2, 6, seed=17)
    w = rand(4, 6, seed=18)

    def loss(x, y):
        joined = ad.concat([x, y], axis=0)
        moved = ad.transpose(joined, (1, 0))
        back = ad.reshape(moved, (4, 6))
        sliced = ad.take(back, (slice(1, 3), slice(None)))
        return (sliced * w[1:3]).sum() + (back * w).sum()

    check_grad(loss, a, b)


def test_embedding_gather_duplicates():
    table = rand(5, 3, seed=19)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    w = rand(2, 3, 3, seed=20)
    check_grad(lambda t: (ad.embedding(t, ids) * w).sum(), table)


def test_attention_block_grad():
    rng = np.random.default_rng(21)
    attn = nn.SelfAttention(8, 2, rng).to_dtype(np.float64)
    x = rand(2, 5, 8, seed=22)
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    params = attn.parameters()

    def loss_value():
        return (attn(ad.Tensor(x), key_mask=mask) ** 2.0).sum().item()

    out = (attn(ad.Tensor(x), key_mask=mask) ** 2.0).sum()
    out.backward()
    for p in params:
        num = numerical_grad(lambda: loss_value(), p.data)
        err = np.abs(p.grad - num) / np.maximum.reduce([np.abs(p.grad), np.abs(num), np.full_like(num, 1e-4)])
        assert err.max() < 1e-5


def test_no_grad_mode():
    p = ad.Parameter(rand(3, seed=23))
    with ad.no_grad():
        out = (p * 2.0).sum()
    assert not out.requires_grad
    out2 = (p * 2.0).sum()
    out2.backward()
    assert np.allclose(p.grad, 2.0)


def test_adamw_untouched_rows_stay_put():
    # rows with zero gradient must not move, including under weight decay exclusion
    p = ad.Parameter(rand(4, 3, seed=24))
    before = p.data.copy()
    opt = nn.AdamW([p], lr=1e-2, weight_decay=0.1, no_decay={id(p)})
    p.grad = np.zeros_like(p.data)
    p.grad[0] = 1.0
    opt.step()
    assert not np.allclose(p.data[0], before[0])
    assert np.array_equal(p.data[1:], before[1:])


def test_clip_global_norm():
    p1, p2 = ad.Parameter(np.zeros(3)), ad.Parameter(np.zeros(4))
    p1.grad = np.full(3, 3.0)
    p2.grad = np.full(4, 4.0)
    norm = nn.clip_global_norm([p1, p2], 1.0)
    assert norm == pytest.approx(np.sqrt(9 * 3 + 16 * 4))
    assert nn.global_norm([p1, p2]) == pytest.approx(1.0, rel=1e-6)
