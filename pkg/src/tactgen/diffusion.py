"""Diffusion engine: schedules, forward noising, losses, guidance, samplers.

Noise prediction only (simple MSE loss). The condition fed to the denoiser is
re-evaluated at every timestep through the time-adaptive fusion rule, during
both training and sampling. Classifier-free guidance combines conditional and
null-conditioned predictions as ``s * eps_c + (1 - s) * eps_null``, evaluated
literally in that form so s=1 and s=0 reduce to the branches bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, SamplingError, TrainingError
from .text import ConditionBundle, fuse_conditions


@dataclass
class NoiseSchedule:
    """beta/alpha/alpha_bar over T steps, 0-indexed (index t holds step t+1)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError("schedule needs T >= 1")
        if self.beta.shape != (self.T,):
            raise ConfigError("beta length must equal T")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        recurrence = self.alpha_bar[1:] == self.alpha_bar[:-1] * self.alpha[1:]
        if not recurrence.all():
            raise ConfigError("alpha_bar recurrence violated")


def make_schedule(T: int = 1000, kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ConfigError("schedule needs T >= 1")
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(1e-4, 2e-2, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    schedule = NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)
    schedule.validate()
    return schedule


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form forward noising x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t_arr = np.asarray(t)
    ab = schedule.alpha_bar[t_arr]
    if t_arr.ndim > 0:  # per-sample timesteps: broadcast over trailing axes
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -- latent codec ---------------------------------------------------------------

class IdentityCodec:
    """Pixel-space 'codec': encode and decode are the identity."""

    name = "identity"

    def encode(self, image: np.ndarray) -> np.ndarray:
        return image

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return latent

    def latent_channels(self, image_channels: int) -> int:
        return image_channels


def check_codec_matches(codec, checkpoint_codec_name: str) -> None:
    if codec.name != checkpoint_codec_name:
        raise ConfigError(
            f"codec {codec.name!r} does not match checkpoint codec {checkpoint_codec_name!r}")


def validate_codec(codec, images: np.ndarray, min_psnr_db: float = 25.0) -> float:
    """Gate non-identity codecs on reconstruction quality before use."""
    recon = np.clip(codec.decode(codec.encode(images)), 0.0, 1.0)
    mse = float(np.mean((recon - images) ** 2))
    psnr = 99.0 if mse == 0.0 else 10.0 * np.log10(1.0 / mse)
    if psnr < min_psnr_db:
        raise ConfigError(f"codec reconstruction {psnr:.2f} dB below {min_psnr_db} dB gate")
    return psnr


def to_diffusion_space(latent: np.ndarray) -> np.ndarray:
    return latent.astype(np.float32) * 2.0 - 1.0


def from_diffusion_space(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) + 1.0) / 2.0


# -- training loss ---------------------------------------------------------------

def training_loss(model, x0: np.ndarray, bundle: ConditionBundle, t: int,
                  eps: np.ndarray, cfg_drop: bool = False,
                  schedule: NoiseSchedule | None = None) -> Tensor:
    """Simple noise-prediction MSE for one sample, with the theta_t branch."""
    schedule = schedule or make_schedule()
    x_t = q_sample(x0, t, eps, schedule)
    cond = fuse_conditions(bundle, t, max_t=schedule.T, unconditional=cfg_drop)
    sen_len = 0
    if not cfg_drop and bundle.c_sen is not None and t >= bundle.theta_t:
        sen_len = bundle.c_sen.shape[0]
    cond_b = ad.reshape(cond, (1,) + cond.shape)
    eps_pred, _ = model(x_t[None], np.array([t]), cond_b, sen_len=sen_len)
    diff = eps_pred - Tensor(eps[None].astype(eps_pred.dtype))
    loss = (diff * diff).mean()
    if not np.isfinite(loss.data):
        raise TrainingError(
            f"non-finite loss at t={t}, |x_t|={float(np.abs(x_t).max()):.3g}")
    return loss


def mse_batch(model, x_t: np.ndarray, t: np.ndarray, cond: Tensor,
              cond_mask: np.ndarray | None, sen_len: int, eps: np.ndarray) -> Tensor:
    """Summed (not averaged) squared error for a batch group sharing one branch."""
    eps_pred, _ = model(x_t, t, cond, cond_mask=cond_mask, sen_len=sen_len)
    diff = eps_pred - Tensor(eps.astype(eps_pred.dtype))
    return (diff * diff).sum() * (1.0 / float(np.prod(eps.shape[1:])))


# -- classifier-free guidance ---------------------------------------------------------

def cfg_noise(model, x_t: np.ndarray, t: int, bundle: ConditionBundle, s: float,
              schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Guided noise prediction s * eps_cond + (1 - s) * eps_null."""
    if not np.isfinite(s):
        raise ValueError("guidance scale must be finite")
    schedule = schedule or make_schedule()
    cond = fuse_conditions(bundle, t, max_t=schedule.T)
    sen_len = 0
    if bundle.c_sen is not None and t >= bundle.theta_t:
        sen_len = bundle.c_sen.shape[0]
    null = fuse_conditions(bundle, t, max_t=schedule.T, unconditional=True)
    eps_c = model(x_t[None], np.array([t]), ad.reshape(cond, (1,) + cond.shape),
                  sen_len=sen_len)[0].data[0]
    eps_n = model(x_t[None], np.array([t]),
                  ad.reshape(null, (1,) + null.shape))[0].data[0]
    return s * eps_c + (1.0 - s) * eps_n


# -- batched conditions for sampling ------------------------------------------------

@dataclass
class CondBatch:
    """Pre-encoded conditions for a batch of samples sampled together."""

    c_obj: np.ndarray             # (B, L, d_c) padded
    obj_mask: np.ndarray          # (B, L) bool
    c_sen: np.ndarray | None      # (B, n_gs, d_c) or None
    null_embedding: np.ndarray    # (1, d_c)
    theta_t: int

    @classmethod
    def from_bundles(cls, bundles: list[ConditionBundle]) -> "CondBatch":
        if not bundles:
            raise ValueError("empty bundle list")
        theta = bundles[0].theta_t
        d_c = bundles[0].c_obj.shape[-1]
        max_len = max(1, max(b.c_obj.shape[0] for b in bundles))
        c_obj = np.zeros((len(bundles), max_len, d_c), dtype=np.float32)
        mask = np.zeros((len(bundles), max_len), dtype=bool)
        sens = []
        for i, b in enumerate(bundles):
            if b.theta_t != theta:
                raise ValueError("bundles in one batch must share theta_t")
            l = b.c_obj.shape[0]
            c_obj[i, :l] = b.c_obj.data
            mask[i, :l] = True
            sens.append(None if b.c_sen is None else b.c_sen.data)
        if any(s is None for s in sens):
            c_sen = None
        else:
            c_sen = np.stack(sens)
        return cls(c_obj=c_obj, obj_mask=mask, c_sen=c_sen,
                   null_embedding=bundles[0].null_embedding.data.copy(), theta_t=theta)

    def fused_at(self, t: int) -> tuple[np.ndarray, np.ndarray, int]:
        """Condition rows, mask, and sensor-row count for timestep t."""
        if self.c_sen is not None and t >= self.theta_t:
            b, n_gs, _ = self.c_sen.shape
            cond = np.concatenate([self.c_sen, self.c_obj], axis=1)
            mask = np.concatenate([np.ones((b, n_gs), dtype=bool), self.obj_mask], axis=1)
            return cond, mask, n_gs
        return self.c_obj, self.obj_mask, 0


def _guided_eps(model, x: np.ndarray, t: int, batch: CondBatch, s: float) -> np.ndarray:
    b = x.shape[0]
    cond, mask, sen_len = batch.fused_at(t)
    t_arr = np.full(b, t)
    eps_c = model(x, t_arr, Tensor(cond), cond_mask=mask, sen_len=sen_len)[0].data
    if s == 1.0:
        return eps_c  # still two branches of Eq. 4, but the null one is weighted 0
    null = np.broadcast_to(batch.null_embedding[None], (b, 1, batch.null_embedding.shape[-1]))
    eps_n = model(x, t_arr, Tensor(np.ascontiguousarray(null)))[0].data
    return s * eps_c + (1.0 - s) * eps_n


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniform stride over [0, T-1] with both endpoints, descending."""
    if not (1 <= steps <= T):
        raise ConfigError(f"steps must lie in [1, {T}]")
    ts = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(int))
    return ts[::-1]


def sample_batch(model, batch: CondBatch, schedule: NoiseSchedule,
                 rng: np.random.Generator, steps: int | None = None,
                 guidance_scale: float = 4.5, method: str = "ddim",
                 codec=None, image_shape: tuple | None = None) -> np.ndarray:
    """Draw one image per condition row; deterministic given the rng state."""
    codec = codec or IdentityCodec()
    b = batch.c_obj.shape[0]
    if image_shape is None:
        cfg = model.cfg
        image_shape = (cfg.image_size, cfg.image_size, cfg.channels)
    x = rng.standard_normal((b,) + tuple(image_shape)).astype(np.float32)

    def check(step_t, arr):
        if not np.isfinite(arr).all():
            raise SamplingError(f"non-finite state at step t={step_t}")

    with ad.no_grad():
        if method == "ancestral":
            for t in range(schedule.T - 1, -1, -1):
                eps = _guided_eps(model, x, t, batch, guidance_scale)
                ab_t = schedule.alpha_bar[t]
                a_t = schedule.alpha[t]
                mean = (x - (schedule.beta[t] / np.sqrt(1.0 - ab_t)) * eps) / np.sqrt(a_t)
                if t > 0:
                    ab_prev = schedule.alpha_bar[t - 1]
                    var = schedule.beta[t] * (1.0 - ab_prev) / (1.0 - ab_t)
                    x = mean + np.sqrt(var) * rng.standard_normal(x.shape).astype(np.float32)
                else:
                    x = mean
                check(t, x)
        elif method == "ddim":
            ts = ddim_timesteps(schedule.T, steps or 50)
            for i, t in enumerate(ts):
                eps = _guided_eps(model, x, int(t), batch, guidance_scale)
                ab_t = schedule.alpha_bar[t]
                x0_hat = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
                x0_hat = np.clip(x0_hat, -1.5, 1.5)
                if i + 1 < len(ts):
                    ab_next = schedule.alpha_bar[ts[i + 1]]
                    x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps
                else:
                    x = x0_hat
                check(int(t), x)
        else:
            raise ConfigError(f"unknown sampler {method!r}")

    images = codec.decode(from_diffusion_space(x))
    return np.clip(images, 0.0, 1.0)


def sample(model, bundle: ConditionBundle, steps: int, s: float, seed: int,
           schedule: NoiseSchedule | None = None, method: str = "ddim",
           codec=None) -> np.ndarray:
    """Generate one image for one condition bundle (see sample_batch)."""
    schedule = schedule or make_schedule()
    batch = CondBatch.from_bundles([bundle])
    rng = np.random.default_rng(seed)
    out = sample_batch(model, batch, schedule, rng, steps=steps,
                       guidance_scale=s, method=method, codec=codec)
    return out[0]
