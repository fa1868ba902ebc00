"""Layers, parameter containers, and the AdamW optimizer.

Thin conveniences over :mod:`tactgen.autodiff`: a Module tree that can
enumerate / serialize its parameters, the handful of layers a small
transformer needs, and multi-head attention helpers shared by the diffusion
backbone and the tactile encoder.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Base container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            src = np.asarray(state[name])
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False, dtype=np.float32):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = xavier_uniform(rng, in_dim, out_dim, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.in_dim))
        out = ad.matmul(flat, self.weight) + self.bias
        return ad.reshape(out, lead + (self.out_dim,))


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator,
                 std: float = 0.02, dtype=np.float32):
        self.weight = Parameter(rng.normal(0.0, std, size=(num_embeddings, dim)).astype(dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, ids)


class LayerNorm(Module):
    """LayerNorm over the last axis, optionally with a learned affine."""

    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6, dtype=np.float32):
        self.eps = eps
        self.affine = affine
        if affine:
            self.weight = Parameter(np.ones(dim, dtype=dtype))
            self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        normed = ad.layer_norm(x, eps=self.eps)
        if self.affine:
            normed = normed * self.weight + self.bias
        return normed


class Mlp(Module):
    """Two-layer feed-forward block with GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 out_dim: int | None = None, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, out_dim if out_dim is not None else dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, n, d) -> (B, heads, n, d / heads)."""
    b, n, d = x.shape
    x = ad.reshape(x, (b, n, heads, d // heads))
    return ad.transpose(x, (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """q: (B,h,nq,hd), k/v: (B,h,nk,hd); key_mask: (B, nk) bool, True = keep."""
    hd = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e30).astype(scores.dtype)
        scores = scores + bias[:, None, None, :]
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 zero_out: bool = False, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, zero_init=zero_out, dtype=dtype)
        self.dim = dim

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x)
        q = split_heads(ad.take(qkv, (slice(None), slice(None), slice(0, d))), self.heads)
        k = split_heads(ad.take(qkv, (slice(None), slice(None), slice(d, 2 * d))), self.heads)
        v = split_heads(ad.take(qkv, (slice(None), slice(None), slice(2 * d, 3 * d))), self.heads)
        out = scaled_dot_attention(q, k, v, key_mask)
        return self.proj(merge_heads(out))


class CrossAttention(Module):
    """Queries from the token stream, keys/values projected from conditioning."""

    def __init__(self, dim: int, cond_dim: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.kv = Linear(cond_dim, 2 * dim, rng, dtype=dtype)
        # zero-init so an untrained conditioning path is inert
        self.proj = Linear(dim, dim, rng, zero_init=True, dtype=dtype)
        self.dim = dim

    def __call__(self, x: Tensor, cond: Tensor, cond_mask: np.ndarray | None = None) -> Tensor:
        d = self.dim
        q = split_heads(self.q(x), self.heads)
        kv = self.kv(cond)
        k = split_heads(ad.take(kv, (slice(None), slice(None), slice(0, d))), self.heads)
        v = split_heads(ad.take(kv, (slice(None), slice(None), slice(d, 2 * d))), self.heads)
        out = scaled_dot_attention(q, k, v, cond_mask)
        return self.proj(merge_heads(out))


def global_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most `max_norm`."""
    norm = global_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay and optional linear warmup."""

    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 warmup_steps: int = 0, no_decay: set[int] | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.no_decay = no_decay or set()
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.t < self.warmup_steps:
            return self.lr * (self.t + 1) / self.warmup_steps
        return self.lr

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m, v = self._m[i], self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay > 0.0 and id(p) not in self.no_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
