"""Diffusion transformer backbone with three dual-grain conditioning mechanisms.

The block stack is adaLN-Zero throughout: every conditioning pathway enters
through a zero-initialized gate or output projection, so an untrained model
is exactly inert to its conditions. Mechanisms:

* ``modulation`` - condition rows are mean-pooled (mask-aware), fused by an
  MLP, added to the timestep embedding, and drive scale/shift/gate.
* ``joint`` - projected condition rows are concatenated with image tokens
  for self-attention; condition rows are discarded from the output.
* ``cross`` - a multi-head cross-attention layer after self-attention;
  queries are image tokens, keys/values are condition rows; the timestep
  modulation of the DiT block is retained.

Blocks whose 1-indexed position is not in ``gel_prompt_layers`` see the
condition with the sensor-prompt rows removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError

MECHANISMS = ("modulation", "joint", "cross")


@dataclass
class DiTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 2
    width: int = 128
    depth: int = 6
    heads: int = 4
    mechanism: str = "cross"
    cond_dim: int = 64
    gel_prompt_layers: tuple[int, ...] | None = None  # None means every layer
    mlp_mult: int = 4
    max_t: int = 1000

    def __post_init__(self):
        if self.gel_prompt_layers is None:
            self.gel_prompt_layers = tuple(range(1, self.depth + 1))
        else:
            self.gel_prompt_layers = tuple(sorted(set(int(i) for i in self.gel_prompt_layers)))

    def validate(self) -> None:
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")
        if self.width % self.heads != 0:
            raise ConfigError("width must be divisible by heads")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image size must be divisible by patch size")
        bad = [i for i in self.gel_prompt_layers if not (1 <= i <= self.depth)]
        if bad:
            raise ConfigError(f"gel_prompt_layers {bad} outside [1, {self.depth}]")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def out_channels(self) -> int:
        return 2 * self.channels  # noise prediction plus variance channels

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, payload: dict) -> "DiTConfig":
        payload = dict(payload)
        layers = payload.get("gel_prompt_layers", None)
        payload["gel_prompt_layers"] = None if layers is None else tuple(layers)
        cfg = cls(**payload)
        cfg.validate()
        return cfg


# -- token <-> image --------------------------------------------------------

def patchify(x, patch_size: int) -> Tensor:
    """(B, H, W, C) -> (B, n, patch_size**2 * C); pure reshape, exact."""
    x = ad.as_tensor(x)
    b, h, w, c = x.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = ad.reshape(x, (b, gh, patch_size, gw, patch_size, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, gh * gw, patch_size * patch_size * c))


def unpatchify(tokens, patch_size: int, height: int, width: int) -> Tensor:
    """(B, n, patch_size**2 * C) -> (B, H, W, C); inverse of patchify."""
    tokens = ad.as_tensor(tokens)
    b, n, d = tokens.shape
    gh, gw = height // patch_size, width // patch_size
    if n != gh * gw:
        raise ValueError(f"{n} tokens cannot tile a {height}x{width}/{patch_size} grid")
    c = d // (patch_size * patch_size)
    x = ad.reshape(tokens, (b, gh, gw, patch_size, patch_size, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, height, width, c))


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    args = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def pos_embed_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos position table, (grid*grid, dim)."""
    if dim % 4 != 0:
        raise ConfigError("width must be divisible by 4 for 2-D position embeddings")
    coords = np.arange(grid, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    emb_y = _sincos_1d(yy.ravel(), dim // 2)
    emb_x = _sincos_1d(xx.ravel(), dim // 2)
    return np.concatenate([emb_y, emb_x], axis=1)


def sinusoidal_timestep_embedding(t, dim: int, max_t: int = 1000) -> np.ndarray:
    """Pre-MLP timestep features; sin half first, so t=0 -> [0..0, 1..1]."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0) or np.any(t_arr > max_t):
        raise ValueError(f"timestep outside [0, {max_t}]")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, rng: np.random.Generator, max_t: int = 1000,
                 dtype=np.float32):
        self.width = width
        self.max_t = max_t
        self.fc1 = nn.Linear(width, width, rng, dtype=dtype)
        self.fc2 = nn.Linear(width, width, rng, dtype=dtype)
        self.dtype = dtype

    def __call__(self, t) -> Tensor:
        feats = sinusoidal_timestep_embedding(t, self.width, self.max_t).astype(
            self.fc1.weight.dtype)
        return self.fc2(ad.silu(self.fc1(Tensor(feats))))


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    # shift/scale are (B, width); broadcast over the token axis
    b, w = shift.shape
    return x * (1.0 + ad.reshape(scale, (b, 1, w))) + ad.reshape(shift, (b, 1, w))


def _gate(x: Tensor, g: Tensor) -> Tensor:
    b, w = g.shape
    return ad.reshape(g, (b, 1, w)) * x


class _AdaLNHead(nn.Module):
    """Zero-initialized projection from the conditioning vector to n_chunk*width."""

    def __init__(self, width: int, n_chunk: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = nn.Linear(width, n_chunk * width, rng, zero_init=True, dtype=dtype)
        self.width = width
        self.n_chunk = n_chunk

    def __call__(self, c: Tensor) -> list[Tensor]:
        out = self.proj(ad.silu(c))
        return [ad.take(out, (slice(None), slice(i * self.width, (i + 1) * self.width)))
                for i in range(self.n_chunk)]


def masked_mean(cond: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over valid condition rows; zero vector when no rows are valid."""
    b, m, d = cond.shape
    if m == 0:
        return Tensor(np.zeros((b, d), dtype=cond.dtype))
    if mask is None:
        return cond.mean(axis=1)
    weights = mask.astype(cond.data.dtype)
    counts = np.maximum(weights.sum(axis=1, keepdims=True), 1.0)
    weighted = cond * Tensor(weights[:, :, None])
    return weighted.sum(axis=1) * Tensor(1.0 / counts)


class _BlockBase(nn.Module):
    def __init__(self, cfg: DiTConfig, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = nn.LayerNorm(cfg.width, affine=False)
        self.norm2 = nn.LayerNorm(cfg.width, affine=False)
        self.attn = nn.SelfAttention(cfg.width, cfg.heads, rng, dtype=dtype)
        self.mlp = nn.Mlp(cfg.width, cfg.width * cfg.mlp_mult, rng, dtype=dtype)
        self.ada = _AdaLNHead(cfg.width, 6, rng, dtype=dtype)


class ModulationBlock(_BlockBase):
    """Condition enters only through the adaLN parameters."""

    def forward(self, x: Tensor, t_cond: Tensor, cond, cond_mask) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(t_cond)
        x = x + _gate(self.attn(_modulate(self.norm1(x), shift1, scale1)), gate1)
        x = x + _gate(self.mlp(_modulate(self.norm2(x), shift2, scale2)), gate2)
        return x


class JointBlock(_BlockBase):
    """Self-attention over [condition rows; image tokens], condition rows dropped."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__(cfg, rng, dtype=dtype)
        self.norm_cond = nn.LayerNorm(cfg.width, affine=False)

    def forward(self, x: Tensor, t_emb: Tensor, cond_w: Tensor | None,
                cond_mask: np.ndarray | None) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(t_emb)
        h = _modulate(self.norm1(x), shift1, scale1)
        if cond_w is not None and cond_w.shape[1] > 0:
            b, m, _ = cond_w.shape
            n = x.shape[1]
            joint = ad.concat([self.norm_cond(cond_w), h], axis=1)
            if cond_mask is None:
                key_mask = None
            else:
                key_mask = np.concatenate(
                    [cond_mask, np.ones((b, n), dtype=bool)], axis=1)
            attended = self.attn(joint, key_mask=key_mask)
            attended = ad.take(attended, (slice(None), slice(m, m + n), slice(None)))
        else:
            attended = self.attn(h)
        x = x + _gate(attended, gate1)
        x = x + _gate(self.mlp(_modulate(self.norm2(x), shift2, scale2)), gate2)
        return x


class CrossBlock(_BlockBase):
    """DiT block plus cross-attention onto condition rows (zero-init output)."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__(cfg, rng, dtype=dtype)
        self.cross = nn.CrossAttention(cfg.width, cfg.cond_dim, cfg.heads, rng, dtype=dtype)

    def forward(self, x: Tensor, t_emb: Tensor, cond: Tensor | None,
                cond_mask: np.ndarray | None) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(t_emb)
        x = x + _gate(self.attn(_modulate(self.norm1(x), shift1, scale1)), gate1)
        if cond is not None and cond.shape[1] > 0:
            x = x + self.cross(x, cond, cond_mask)
        x = x + _gate(self.mlp(_modulate(self.norm2(x), shift2, scale2)), gate2)
        return x


class DiT(nn.Module):
    """Patch-tokenized denoiser; predicts noise plus variance channels."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.width, rng, dtype=dtype)
        self.pos_embed = pos_embed_2d(cfg.image_size // cfg.patch_size,
                                      cfg.width).astype(dtype)
        self.t_embedder = TimestepEmbedder(cfg.width, rng, max_t=cfg.max_t, dtype=dtype)
        block_cls = {"modulation": ModulationBlock, "joint": JointBlock,
                     "cross": CrossBlock}[cfg.mechanism]
        self.blocks = [block_cls(cfg, rng, dtype=dtype) for _ in range(cfg.depth)]
        if cfg.mechanism == "modulation":
            self.cond_mlp = nn.Mlp(cfg.cond_dim, cfg.width, rng, out_dim=cfg.width,
                                   dtype=dtype)
        elif cfg.mechanism == "joint":
            self.cond_proj = nn.Linear(cfg.cond_dim, cfg.width, rng, dtype=dtype)
        self.final_norm = nn.LayerNorm(cfg.width, affine=False)
        self.final_ada = _AdaLNHead(cfg.width, 2, rng, dtype=dtype)
        self.head = nn.Linear(cfg.width, cfg.patch_size ** 2 * cfg.out_channels, rng,
                              zero_init=True, dtype=dtype)

    def to_dtype(self, dtype) -> "DiT":
        super().to_dtype(dtype)
        self.pos_embed = self.pos_embed.astype(dtype)
        return self

    # -- composable pieces (used directly by the zero-init identity tests) ----
    def embed_tokens(self, x_t) -> Tensor:
        tokens = patchify(x_t, self.cfg.patch_size)
        return self.patch_embed(tokens) + Tensor(self.pos_embed)

    def apply_head(self, tokens: Tensor, t_emb: Tensor) -> tuple[Tensor, Tensor]:
        shift, scale = self.final_ada(t_emb)
        out = self.head(_modulate(self.final_norm(tokens), shift, scale))
        img = unpatchify(out, self.cfg.patch_size, self.cfg.image_size, self.cfg.image_size)
        c = self.cfg.channels
        eps = ad.take(img, (slice(None), slice(None), slice(None), slice(0, c)))
        extra = ad.take(img, (slice(None), slice(None), slice(None), slice(c, 2 * c)))
        return eps, extra

    def _block_condition(self, index: int, cond: Tensor | None,
                         cond_mask: np.ndarray | None, sen_len: int):
        """Strip sensor rows for blocks outside gel_prompt_layers (1-indexed)."""
        if cond is None:
            return None, None
        if sen_len > 0 and (index + 1) not in self.cfg.gel_prompt_layers:
            stripped = ad.take(cond, (slice(None), slice(sen_len, cond.shape[1]),
                                      slice(None)))
            mask = None if cond_mask is None else cond_mask[:, sen_len:]
            return stripped, mask
        return cond, cond_mask

    def __call__(self, x_t, t, cond: Tensor | None, cond_mask: np.ndarray | None = None,
                 sen_len: int = 0, record: list | None = None) -> tuple[Tensor, Tensor]:
        """Denoise x_t (B, H, W, C) at timesteps t given fused condition rows.

        cond: (B, m, cond_dim) with sensor rows first when sen_len > 0;
        record, when given, receives (block_index, valid_row_counts) tuples.
        """
        x_t = ad.as_tensor(x_t)
        if not np.isfinite(x_t.data).all():
            raise ValueError("x_t contains non-finite values")
        if cond is not None and cond.shape[-1] != self.cfg.cond_dim:
            raise ValueError(
                f"condition width {cond.shape[-1]} != configured {self.cfg.cond_dim}")
        tokens = self.embed_tokens(x_t)
        t_emb = self.t_embedder(t)
        if t_emb.shape[0] == 1 and tokens.shape[0] > 1:
            t_emb = ad.concat([t_emb] * tokens.shape[0], axis=0)

        pooled_cache: dict[int, Tensor] = {}

        def modulation_cond(block_cond, block_mask, key):
            if key not in pooled_cache:
                pooled = masked_mean(block_cond, block_mask) if block_cond is not None \
                    else Tensor(np.zeros((tokens.shape[0], self.cfg.cond_dim),
                                         dtype=tokens.dtype))
                pooled_cache[key] = t_emb + self.cond_mlp(pooled)
            return pooled_cache[key]

        cond_w = None
        if self.cfg.mechanism == "joint" and cond is not None and cond.shape[1] > 0:
            cond_w = self.cond_proj(cond)

        for i, block in enumerate(self.blocks):
            block_cond, block_mask = self._block_condition(i, cond, cond_mask, sen_len)
            if record is not None:
                if block_cond is None:
                    counts = np.zeros(tokens.shape[0], dtype=int)
                elif block_mask is None:
                    counts = np.full(tokens.shape[0], block_cond.shape[1])
                else:
                    counts = block_mask.sum(axis=1)
                record.append((i + 1, counts))
            if self.cfg.mechanism == "modulation":
                key = 0 if (block_cond is cond) else 1
                tokens = block.forward(tokens, modulation_cond(block_cond, block_mask, key),
                                       block_cond, block_mask)
            elif self.cfg.mechanism == "joint":
                bc = None
                if cond_w is not None:
                    bc, block_mask = self._block_condition(i, cond_w, cond_mask, sen_len)
                tokens = block.forward(tokens, t_emb, bc, block_mask)
            else:
                tokens = block.forward(tokens, t_emb, block_cond, block_mask)
        return self.apply_head(tokens, t_emb)


def save_dit(path, model: DiT) -> None:
    from .checkpoint import save_checkpoint
    save_checkpoint(path, {"kind": "dit", **model.cfg.to_dict()}, model.state_dict())


def load_dit(path) -> DiT:
    from .checkpoint import load_checkpoint
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "dit":
        raise ConfigError(f"{path}: not a diffusion backbone checkpoint")
    payload = {k: v for k, v in config.items() if k != "kind"}
    cfg = DiTConfig.from_dict(payload)
    model = DiT(cfg, np.random.default_rng(0))
    model.load_state_dict(tensors)
    return model
