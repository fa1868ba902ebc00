"""Text conditioning: caption template, tokenizer, encoders, prompt bank.

Object-level captions follow the fixed template "the touch of [shape] is
[texture]" and are encoded by a small trainable token-embedding +
single-layer self-attention encoder. Sensor-level conditions are learnable
prompt rows, one block of `n_gs` rows per gel status, injected post-encoding.
Fusion is time-adaptive: gel rows are prepended only when the diffusion
timestep is at or above the configured threshold.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor
from .errors import CaptionError, ConfigError

PAD_ID = 0
OOV_ID = 1

CAPTION_TEMPLATE = "the touch of {shape} is {texture}"
_CAPTION_RE = re.compile(r"^the touch of (.+) is (.+)$")


def build_caption(shape_caption: str, texture_caption: str) -> str:
    """Instantiate the dual-grain caption template (lowercase-normalized)."""
    if not shape_caption or not texture_caption:
        raise CaptionError("contact samples must carry both shape and texture captions")
    return CAPTION_TEMPLATE.format(shape=shape_caption, texture=texture_caption).lower()


def parse_caption(caption: str) -> tuple[str, str]:
    """Inverse of build_caption for disjoint shape/texture vocabularies."""
    match = _CAPTION_RE.match(caption)
    if not match:
        raise CaptionError(f"caption does not match template: {caption!r}")
    return match.group(1), match.group(2)


class Vocabulary:
    """Word-level vocabulary with reserved padding (0) and OOV (1) ids."""

    def __init__(self, words: list[str]):
        deduped: list[str] = []
        seen: set[str] = set()
        for w in words:
            w = w.strip().lower()
            if w and w not in seen:
                seen.add(w)
                deduped.append(w)
        if not deduped:
            raise ConfigError("vocabulary must contain at least one word")
        self.words = deduped
        self._ids = {w: i + 2 for i, w in enumerate(deduped)}

    def __len__(self) -> int:
        return len(self.words) + 2

    def id_of(self, word: str) -> int:
        return self._ids.get(word.lower(), OOV_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip()])

    @classmethod
    def from_manifest(cls, texture_vocab: list[str], shape_vocab: list[str]) -> "Vocabulary":
        words: list[str] = ["the", "touch", "of", "is"]
        for phrase in list(shape_vocab) + list(texture_vocab):
            words.extend(phrase.lower().split())
        return cls(words)


@dataclass
class TokenSequence:
    ids: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def tokenize(text: str, vocab: Vocabulary, max_len: int = 32) -> TokenSequence:
    """Whitespace word-split with OOV bucketing; total on any input."""
    words = text.lower().split()
    truncated = len(words) > max_len
    ids = np.array([vocab.id_of(w) for w in words[:max_len]], dtype=np.int64)
    return TokenSequence(ids=ids, truncated=truncated)


@dataclass
class ConditioningConfig:
    d_c: int = 64
    n_gs: int = 4
    gel_count: int = 3
    max_len: int = 32
    theta_t: int = 600
    max_t: int = 1000
    encoder_heads: int = 4
    encoder_hidden_mult: int = 4

    def validate(self) -> None:
        if self.d_c % self.encoder_heads != 0:
            raise ConfigError("d_c must be divisible by encoder heads")
        if self.n_gs < 1:
            raise ConfigError("n_gs must be at least 1")
        if not (0 <= self.theta_t <= self.max_t):
            raise ConfigError("theta_t must lie in [0, max_t]")


@dataclass
class ConditionBundle:
    """Encoded conditions for one sample, ready for time-adaptive fusion."""

    c_obj: Tensor                 # (l, d_c)
    c_sen: Tensor | None          # (n_gs, d_c) or None when gel conditioning is off
    null_embedding: Tensor        # (1, d_c), learned
    theta_t: int
    gel_id: int

    def validate(self) -> None:
        d = self.c_obj.shape[-1]
        if self.c_sen is not None and self.c_sen.shape[-1] != d:
            raise ConfigError("c_obj and c_sen must share the embedding width")
        if self.null_embedding.shape != (1, d):
            raise ConfigError("null embedding must be a single d_c row")
        for part in (self.c_obj, self.c_sen, self.null_embedding):
            if part is not None and not np.isfinite(part.data).all():
                raise ConfigError("condition rows must be finite")


def _sinusoidal_rows(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 1-D sin/cos position table, sin half first."""
    if length == 0:
        return np.zeros((0, dim), dtype=dtype)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(1, half))
    args = np.arange(length)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return table.astype(dtype)


class ObjectTextEncoder(nn.Module):
    """Token embedding + one bidirectional self-attention layer."""

    def __init__(self, vocab_size: int, cfg: ConditioningConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, cfg.d_c, rng, dtype=dtype)
        self.norm1 = nn.LayerNorm(cfg.d_c, dtype=dtype)
        self.attn = nn.SelfAttention(cfg.d_c, cfg.encoder_heads, rng, dtype=dtype)
        self.norm2 = nn.LayerNorm(cfg.d_c, dtype=dtype)
        self.mlp = nn.Mlp(cfg.d_c, cfg.d_c * cfg.encoder_hidden_mult, rng, dtype=dtype)
        self.norm_out = nn.LayerNorm(cfg.d_c, dtype=dtype)
        self._pos_cache: dict[tuple[int, str], np.ndarray] = {}

    def _pos(self, length: int, dtype) -> np.ndarray:
        key = (length, np.dtype(dtype).name)
        if key not in self._pos_cache:
            self._pos_cache[key] = _sinusoidal_rows(length, self.cfg.d_c, dtype)
        return self._pos_cache[key]

    def encode_batch(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """ids: (B, L) int; mask: (B, L) bool, True = real token. Returns (B, L, d_c)."""
        b, l = ids.shape
        if l == 0:
            return Tensor(np.zeros((b, 0, self.cfg.d_c), dtype=self.embed.weight.dtype))
        x = self.embed(ids) + self._pos(l, self.embed.weight.dtype)
        x = x + self.attn(self.norm1(x), key_mask=mask)
        x = x + self.mlp(self.norm2(x))
        return self.norm_out(x)

    def __call__(self, tokens: TokenSequence) -> Tensor:
        """Encode one sequence to (l, d_c)."""
        out = self.encode_batch(tokens.ids[None, :])
        return ad.reshape(out, (len(tokens), self.cfg.d_c))


class GelPromptBank(nn.Module):
    """Learnable sensor-level prompts, n_gs rows per gel status."""

    def __init__(self, cfg: ConditioningConfig, rng: np.random.Generator, dtype=np.float32):
        self.bank = Parameter(rng.normal(0.0, 0.02,
                                         size=(cfg.gel_count, cfg.n_gs, cfg.d_c)).astype(dtype))
        self.gel_count = cfg.gel_count

    def prompts_for(self, gel_id) -> Tensor:
        """gel_id int -> (n_gs, d_c); int array (B,) -> (B, n_gs, d_c)."""
        if np.isscalar(gel_id):
            if not (0 <= int(gel_id) < self.gel_count):
                raise IndexError(f"gel_id {gel_id} outside [0, {self.gel_count})")
            return ad.embedding(self.bank, np.array(int(gel_id)))
        return ad.embedding(self.bank, np.asarray(gel_id))


class TextConditioner(nn.Module):
    """Everything needed to turn (caption, gel_id) into fusion-ready conditions."""

    def __init__(self, vocab: Vocabulary, cfg: ConditioningConfig, rng: np.random.Generator,
                 use_gel_prompts: bool = True, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = ObjectTextEncoder(len(vocab), cfg, rng, dtype=dtype)
        self.prompts = GelPromptBank(cfg, rng, dtype=dtype) if use_gel_prompts else None
        self.null_embedding = Parameter(rng.normal(0.0, 0.02, size=(1, cfg.d_c)).astype(dtype))

    def tokenize(self, text: str) -> TokenSequence:
        return tokenize(text, self.vocab, self.cfg.max_len)

    def bundle(self, caption: str, gel_id: int, use_gel: bool = True) -> ConditionBundle:
        tokens = self.tokenize(caption)
        c_obj = self.encoder(tokens)
        c_sen = None
        if use_gel and self.prompts is not None:
            c_sen = self.prompts.prompts_for(gel_id)
        return ConditionBundle(c_obj=c_obj, c_sen=c_sen,
                               null_embedding=self.null_embedding,
                               theta_t=self.cfg.theta_t, gel_id=gel_id)


def fuse_conditions(bundle: ConditionBundle, t: int, max_t: int = 1000,
                    unconditional: bool = False) -> Tensor:
    """Time-adaptive fusion: [c_sen; c_obj] for t >= theta_t, else c_obj alone."""
    if not (0 <= t <= max_t):
        raise ValueError(f"timestep {t} outside [0, {max_t}]")
    if unconditional:
        return bundle.null_embedding
    if bundle.c_sen is not None and t >= bundle.theta_t:
        return ad.concat([bundle.c_sen, bundle.c_obj], axis=0)
    return bundle.c_obj


def fuse_batch(c_sen: Tensor | None, c_obj: Tensor,
               obj_mask: np.ndarray) -> tuple[Tensor, np.ndarray, int]:
    """Batched fusion for samples sharing one branch.

    c_sen: (B, n_gs, d_c) or None; c_obj: (B, L, d_c); obj_mask: (B, L) bool.
    Returns (cond, cond_mask, sen_len); gel rows are always valid.
    """
    if c_sen is None:
        return c_obj, obj_mask, 0
    b, n_gs, _ = c_sen.shape
    cond = ad.concat([c_sen, c_obj], axis=1)
    mask = np.concatenate([np.ones((b, n_gs), dtype=bool), obj_mask], axis=1)
    return cond, mask, n_gs


def pad_token_batch(sequences: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged token sequences into (B, L) ids and a validity mask."""
    if not sequences:
        raise ValueError("empty batch")
    max_len = max(1, max(len(s) for s in sequences))
    ids = np.full((len(sequences), max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), max_len), dtype=bool)
    for i, seq in enumerate(sequences):
        ids[i, :len(seq)] = seq.ids
        mask[i, :len(seq)] = True
    return ids, mask
