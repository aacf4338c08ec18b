"""Denoising diffusion: schedule, closed-form noising, training loss, sampling.

Images live in [-1, 1]. Timesteps are 0-based: ``t = 0`` is the first
noising step and ``T - 1`` the last.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nncore
from .errors import ConfigError, FormatError, NumericError

DEFAULT_T = 200
DDPM_BETA_MIN = 1e-4
DDPM_BETA_MAX = 0.02
SCHEDULE_MAGIC = b"MDSH"


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def coef(self, name: str, t) -> torch.Tensor:
        return torch.as_tensor(getattr(self, name)[t], dtype=torch.float32)


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear beta schedule from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T == 1:
        beta = np.array([beta_min], dtype=np.float64)
    else:
        beta = beta_min + (beta_max - beta_min) * np.arange(T, dtype=np.float64) / (T - 1)
    alpha = 1.0 - beta
    return NoiseSchedule(beta_min, beta_max, beta, alpha, np.cumprod(alpha))


def default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """The usual 1e-4 -> 0.02 endpoints, rescaled by 1000/T.

    Rescaling keeps the total noise of a 1000-step chain, so even a short
    chain ends at (numerically) pure noise.
    """
    scale = 1000.0 / T
    return make_schedule(T, DDPM_BETA_MIN * scale, min(DDPM_BETA_MAX * scale, 0.999))


def _check_t(t, schedule):
    ts = np.atleast_1d(np.asarray(t))
    if ts.size and (ts.min() < 0 or ts.max() >= schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T}): {t}")


def _per_sample(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if coef.dim() == 0:
        return coef
    return coef.view(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(s0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(s_t | s_0): sqrt(abar_t) * s0 + sqrt(1 - abar_t) * noise.

    ``t`` may be an int or one timestep per batch element.
    """
    if noise.shape != s0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != signal shape {tuple(s0.shape)}")
    _check_t(t, schedule)
    if torch.is_tensor(t):
        t = t.cpu().numpy()
    abar = schedule.alpha_bar[t]
    a = _per_sample(torch.as_tensor(np.sqrt(abar), dtype=s0.dtype), s0)
    b = _per_sample(torch.as_tensor(np.sqrt(1.0 - abar), dtype=s0.dtype), s0)
    return a * s0 + b * noise


# ---------------------------------------------------------------------------
# denoiser network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """Small conv encoder/decoder predicting the noise in ``s_t``.

    Encoder stage ``i`` (one conv) runs at 1/2^i resolution. Each decoder
    stage upsamples (nearest), adds the matching encoder output as a skip
    connection and applies one conv. A sinusoidal time embedding, projected
    per stage, is added to every conv output before the ReLU.
    """

    def __init__(self, channels: int = 3, widths=(32, 64, 64), time_embed_dim: int = 64):
        super().__init__()
        self.channels = channels
        self.widths = tuple(widths)
        self.time_embed_dim = time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_embed_dim, time_embed_dim), nn.ReLU(), nn.Linear(time_embed_dim, time_embed_dim))
        n = len(self.widths)
        ins = (channels,) + self.widths[:-1]
        self.enc = nn.ModuleList(nn.Conv2d(i, o, 3, padding=1) for i, o in zip(ins, self.widths))
        self.enc_t = nn.ModuleList(nn.Linear(time_embed_dim, w) for w in self.widths)
        # decoder stage i (for i = n-2 .. 0) brings width[i+1] back to width[i]
        self.proj = nn.ModuleList(
            nn.Conv2d(self.widths[i + 1], self.widths[i], 1) if self.widths[i + 1] != self.widths[i]
            else nn.Identity() for i in range(n - 1))
        self.dec = nn.ModuleList(nn.Conv2d(w, w, 3, padding=1) for w in self.widths[:-1])
        self.dec_t = nn.ModuleList(nn.Linear(time_embed_dim, w) for w in self.widths[:-1])
        self.head = nn.Conv2d(self.widths[0], channels, 3, padding=1)
        # set by training or checkpoint loading; generation refuses untrained nets
        self.trained = False

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long)
        elif t.dim() == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.time_embed_dim).to(x.dtype))
        skips = []
        h = x
        for i, (conv, lin) in enumerate(zip(self.enc, self.enc_t)):
            if i > 0:
                h = F.max_pool2d(h, 2)
            h = F.relu(conv(h) + lin(temb)[:, :, None, None])
            skips.append(h)
        for i in range(len(self.widths) - 2, -1, -1):
            h = F.interpolate(self.proj[i](h), scale_factor=2, mode="nearest") + skips[i]
            h = F.relu(self.dec[i](h) + self.dec_t[i](temb)[:, :, None, None])
        return self.head(h)


def build_denoiser(seed: int, channels=3, widths=(32, 64, 64), time_embed_dim=64) -> Denoiser:
    """He-uniform initialised denoiser whose output conv starts at zero."""
    model = Denoiser(channels, widths, time_embed_dim)
    nncore.he_uniform_(model, torch.Generator().manual_seed(seed))
    with torch.no_grad():
        model.head.weight.zero_()
    return model


# ---------------------------------------------------------------------------
# objective and sampling


def diffusion_loss(model, s0_batch: torch.Tensor, schedule: NoiseSchedule,
                   rng: torch.Generator) -> torch.Tensor:
    """Mean squared error between predicted and true noise, t ~ U[0, T)."""
    if s0_batch.shape[0] == 0:
        raise ValueError("empty batch")
    b = s0_batch.shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=rng)
    # drawn in float32 whatever the batch dtype, so a float64 replay sees the same noise
    eps = torch.randn(s0_batch.shape, generator=rng).to(s0_batch.dtype)
    s_t = forward_diffuse(s0_batch, t, eps, schedule)
    pred = model(s_t, t)
    return ((pred - eps) ** 2).mean()


@torch.no_grad()
def denoise_step(model, s_t: torch.Tensor, t: int, schedule: NoiseSchedule, rng=None,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """One ancestral step s_t -> s_{t-1}; no noise is added at t = 0.

    Fresh noise comes from ``rng`` unless ``noise`` is given explicitly.
    """
    _check_t(t, schedule)
    beta = schedule.beta[t]
    eps = model(s_t, t)
    mean = (s_t - (beta / math.sqrt(1.0 - schedule.alpha_bar[t])) * eps) / math.sqrt(schedule.alpha[t])
    if t == 0:
        return mean
    if noise is None:
        noise = torch.randn(s_t.shape, generator=rng, dtype=s_t.dtype)
    return mean + math.sqrt(beta) * noise


@torch.no_grad()
def sample(model, shape, schedule: NoiseSchedule, rng: torch.Generator) -> torch.Tensor:
    """Full reverse chain from pure noise, clamped to [-1, 1]."""
    x = torch.randn(shape, generator=rng)
    for t in range(schedule.T - 1, -1, -1):
        x = denoise_step(model, x, t, schedule, rng)
    return x.clamp(-1.0, 1.0)


@dataclass(frozen=True)
class GeneratorConfig:
    strength: float
    seed: int
    schedule: NoiseSchedule

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"strength must lie in [0, 1], got {self.strength}")

    @property
    def t_start(self) -> int:
        return strength_to_timestep(self.strength, self.schedule.T)


def strength_to_timestep(strength: float, T: int) -> int:
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"strength must lie in [0, 1], got {strength}")
    # floor(x + 0.5): half-up, not banker's rounding
    return int(math.floor(strength * T + 0.5))


def image_generator(*key: int) -> torch.Generator:
    """Torch generator seeded from an integer key such as (seed, stream, index)."""
    ss = np.random.SeedSequence([int(k) for k in key])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


@torch.no_grad()
def img2img_batch(model, sources: torch.Tensor, strength: float, schedule: NoiseSchedule,
                  generators, return_start: bool = False):
    """Strength-controlled image-to-image generation for a batch.

    ``generators`` holds one torch generator per image so every image's
    noise is independent of how images are batched.
    """
    t_start = strength_to_timestep(strength, schedule.T)
    if t_start == 0:
        return (sources, sources) if return_start else sources
    if len(generators) != sources.shape[0]:
        raise ValueError("need one generator per source image")
    shape = sources.shape[1:]

    def draw():
        return torch.stack([torch.randn(shape, generator=g) for g in generators])

    x = forward_diffuse(sources, t_start - 1, draw(), schedule)
    start = x.clone()
    for t in range(t_start - 1, -1, -1):
        x = denoise_step(model, x, t, schedule, noise=draw() if t > 0 else None)
    if not torch.isfinite(x).all():
        raise NumericError("non-finite values in generated images")
    x = x.clamp(-1.0, 1.0)
    return (x, start) if return_start else x


def img2img_generate(model, source: torch.Tensor, cfg: GeneratorConfig) -> torch.Tensor:
    """Diffuse ``source`` to ``round(strength * T)`` steps, then denoise back.

    ``source`` is one image [C,H,W] or a batch; batch element ``i`` draws
    its noise from the stream keyed by ``(cfg.seed, i)``. Strength 0 returns
    the input object untouched.
    """
    single = source.dim() == 3
    batch = source[None] if single else source
    gens = [image_generator(cfg.seed, i) for i in range(batch.shape[0])]
    out = img2img_batch(model, batch, cfg.strength, cfg.schedule, gens)
    if out is batch:
        return source
    return out[0] if single else out


# ---------------------------------------------------------------------------
# training


def train_denoiser(model: Denoiser, images: torch.Tensor, schedule: NoiseSchedule, epochs: int,
                   lr: float = 2e-3, batch_size: int = 32, seed: int = 0, on_epoch=None,
                   decay_at: float = 0.7, decay: float = 0.3) -> list:
    """Minimise :func:`diffusion_loss` with Adam; returns mean loss per epoch.

    The learning rate is multiplied by ``decay`` once, after ``decay_at`` of
    the epochs.
    """
    rng = torch.Generator().manual_seed(seed)
    opt = nncore.Adam(model, lr=lr)
    n = images.shape[0]
    history = []
    model.train()
    for epoch in range(epochs):
        if epoch == int(decay_at * epochs) and epoch > 0:
            opt.state.learning_rate *= decay
        order = torch.randperm(n, generator=rng)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            batch = images[order[start:start + batch_size]]
            loss = diffusion_loss(model, batch, schedule, rng)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite diffusion loss at epoch {epoch}")
            nncore.backward_pass(loss)
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / batches)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    model.trained = True
    model.eval()
    return history


# ---------------------------------------------------------------------------
# checkpoints


def encode_denoiser(model: Denoiser, schedule: NoiseSchedule) -> bytes:
    """Schedule/architecture header block followed by an MDMC parameter block."""
    header = SCHEDULE_MAGIC + struct.pack(
        "<Idd", schedule.T, schedule.beta_min, schedule.beta_max)
    header += struct.pack("<IIB", model.channels, model.time_embed_dim, len(model.widths))
    header += struct.pack(f"<{len(model.widths)}I", *model.widths)
    return header + nncore.encode_params(nncore.model_params(model))


def decode_denoiser(buf: bytes):
    if buf[:4] != SCHEDULE_MAGIC:
        raise FormatError("not a denoiser checkpoint (missing schedule block)")
    try:
        T, bmin, bmax = struct.unpack_from("<Idd", buf, 4)
        channels, ted, nw = struct.unpack_from("<IIB", buf, 24)
        widths = struct.unpack_from(f"<{nw}I", buf, 33)
    except struct.error as exc:
        raise FormatError("denoiser checkpoint truncated") from exc
    params, end = nncore.decode_params(buf, 33 + 4 * nw)
    if end != len(buf):
        raise FormatError("trailing bytes after denoiser checkpoint")
    model = Denoiser(channels, widths, ted)
    nncore.load_into(model, params)
    model.trained = True
    model.eval()
    return model, make_schedule(T, bmin, bmax)


def save_denoiser(path, model: Denoiser, schedule: NoiseSchedule) -> str:
    data = encode_denoiser(model, schedule)
    with open(path, "wb") as fh:
        fh.write(data)
    return nncore.digest_bytes(data)


def load_denoiser(path):
    with open(path, "rb") as fh:
        data = fh.read()
    model, schedule = decode_denoiser(data)
    return model, schedule, nncore.digest_bytes(data)
