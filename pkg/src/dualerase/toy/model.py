"""A desk-scale multi-view diffusion model exposing all three attention kinds.

Encoder: two stride-2 conv stages, 32x32 image -> 8x8 latent, RMS-normalized.
Denoiser: concat(noisy slot latent, reference latent) -> two residual blocks,
each followed by self-, multi-view- and cross-domain attention. The reference
latent is fed to the front-view color slot only (zeros elsewhere), so every
other slot has to pull the object through attention.
Decoder: mirror of the encoder with a sigmoid output.

The network head predicts the clean latent; ``denoise_with_capture`` converts
it to the noise prediction the backend contract asks for. Predicting noise
directly gave a model that ignored its conditioning at large t.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..attention import AttentionCapture, assign_resolution_ranks, attention_map
from ..backend import NoiseSchedule
from ..masks import AttentionKind

WEIGHTS_FORMAT_VERSION = 2
INIT_LOGIT_SCALE = 10.0
MAX_LOGIT_SCALE = 100.0


@dataclass(frozen=True)
class ToyConfig:
    image_side: int = 32
    latent_side: int = 8
    channels: int = 16
    width: int = 32
    heads: int = 2
    n_blocks: int = 2
    encoder_hidden: int = 16
    n_v: int = 4
    n_d: int = 2
    t_max: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name not in ("seed", "beta_start", "beta_end") and value <= 0:
                raise ValueError(f"ToyConfig.{name} must be positive, got {value}")
        if self.image_side != self.latent_side * 4:
            raise ValueError("image_side must be 4 * latent_side (two stride-2 stages)")
        if self.width % self.heads or self.width % 8:
            raise ValueError("width must be divisible by heads and by 8 (group norm)")

    @property
    def D(self) -> int:
        return self.latent_side**2


@dataclass
class ToyCondition:
    view_index: torch.Tensor
    domain_index: torch.Tensor
    reference: torch.Tensor


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Encoder(nn.Module):
    def __init__(self, channels: int, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x):
        h = self.net(x * 2 - 1)
        return h / torch.sqrt(h.pow(2).mean(dim=(1, 2, 3), keepdim=True) + 1e-6)


class Decoder(nn.Module):
    def __init__(self, channels: int, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.emb = nn.Linear(width, width)
        self.norm2 = nn.GroupNorm(8, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, h, emb):
        r = self.conv1(F.silu(self.norm1(h)))
        r = r + self.emb(emb)[:, :, None, None]
        r = self.conv2(F.silu(self.norm2(r)))
        return h + r


class SlotAttention(nn.Module):
    """Pre-norm residual attention whose keys are gathered per attention kind."""

    def __init__(self, width: int, heads: int, kind: AttentionKind, n_v: int, n_d: int):
        super().__init__()
        self.kind = kind
        self.heads = heads
        self.n_v, self.n_d = n_v, n_d
        self.norm = nn.LayerNorm(width)
        self.to_q = nn.Linear(width, width, bias=False)
        self.to_k = nn.Linear(width, width, bias=False)
        self.to_v = nn.Linear(width, width, bias=False)
        self.to_out = nn.Linear(width, width)
        # cosine attention with a learned per-head temperature
        self.log_scale = nn.Parameter(torch.full((heads, 1, 1), math.log(INIT_LOGIT_SCALE)))

    @property
    def k(self) -> int:
        if self.kind is AttentionKind.MULTI_VIEW:
            return self.n_v
        if self.kind is AttentionKind.CROSS_DOMAIN:
            return self.n_d
        return 1

    def _gather(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, D, C) with B = N * n_d * n_v, view fastest
        B, D, C = x.shape
        n_v, n_d = self.n_v, self.n_d
        if self.kind is AttentionKind.SELF:
            return x
        N = B // (n_v * n_d)
        grid = x.reshape(N, n_d, n_v, D, C)
        if self.kind is AttentionKind.MULTI_VIEW:
            # (N, n_d, n_v * D, C), then repeated for each of the n_v views
            pooled = grid.reshape(N, n_d, 1, n_v * D, C)
            return pooled.expand(N, n_d, n_v, n_v * D, C).reshape(B, n_v * D, C)
        pooled = grid.permute(0, 2, 1, 3, 4).reshape(N, 1, n_v, n_d * D, C)
        return pooled.expand(N, n_d, n_v, n_d * D, C).reshape(B, n_d * D, C)

    def _split(self, x):
        B, L, C = x.shape
        return x.reshape(B, L, self.heads, C // self.heads).transpose(1, 2)

    def forward(self, h: torch.Tensor):
        B, L, C = h.shape
        x = self.norm(h)
        q = F.normalize(self._split(self.to_q(x)), dim=-1)
        k = F.normalize(self._split(self._gather(self.to_k(x))), dim=-1)
        v = self._split(self._gather(self.to_v(x)))
        scale = self.log_scale.clamp(max=math.log(MAX_LOGIT_SCALE)).exp()
        m = attention_map(q * scale, k, d=1)
        out = (m @ v).transpose(1, 2).reshape(B, L, C)
        return h + self.to_out(out), m


class ToyMVDM(nn.Module):
    """Reference backend. Satisfies :class:`dualerase.backend.ModelBackend`."""

    flatten_order = "row-major"

    def __init__(self, config: ToyConfig | None = None):
        super().__init__()
        config = config or ToyConfig()
        self.config = config
        self.n_v, self.n_d = config.n_v, config.n_d
        self.latent_side = config.latent_side
        self.t_max = config.t_max
        self.schedule = NoiseSchedule(config.t_max, config.beta_start, config.beta_end)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self._build(config)

    def _build(self, config: ToyConfig) -> None:
        w, c = config.width, config.channels
        self.encoder = Encoder(c, config.encoder_hidden)
        self.decoder = Decoder(c, config.encoder_hidden)
        self.conv_in = nn.Conv2d(2 * c, w, 3, padding=1)
        self.pos = nn.Parameter(torch.randn(1, w, config.latent_side, config.latent_side) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.view_emb = nn.Embedding(config.n_v, w)
        self.domain_emb = nn.Embedding(config.n_d, w)
        self.res = nn.ModuleList(ResBlock(w) for _ in range(config.n_blocks))
        kinds = (AttentionKind.SELF, AttentionKind.MULTI_VIEW, AttentionKind.CROSS_DOMAIN)
        self.attn = nn.ModuleList(
            nn.ModuleList(SlotAttention(w, config.heads, kind, config.n_v, config.n_d) for kind in kinds)
            for _ in range(config.n_blocks)
        )
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, c, 3, padding=1)

    @property
    def identifier(self) -> str:
        return f"toy-mvdm@{self.weights_hash()[:16]}"

    @property
    def dtype(self) -> torch.dtype:
        return self.pos.dtype

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        return self.encoder(image.to(self.dtype))

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return self.decoder(latent)

    def embed_condition(self, view_index, domain_index, reference) -> ToyCondition:
        return ToyCondition(view_index.long(), domain_index.long(), reference)

    def denoise_with_capture(
        self, z_t: torch.Tensor, t, condition: ToyCondition
    ) -> tuple[torch.Tensor, list[AttentionCapture]]:
        x0, captures = self.predict_x0(z_t, t, condition)
        ab = self.schedule.alpha_bar(self._timesteps(t, z_t.shape[0])).to(z_t.dtype).view(-1, 1, 1, 1)
        eps = (z_t - ab.sqrt() * x0) / (1 - ab).sqrt()
        return eps, captures

    @staticmethod
    def _timesteps(t, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        return t.expand(batch) if t.numel() == 1 else t

    def predict_x0(
        self, z_t: torch.Tensor, t, condition: ToyCondition
    ) -> tuple[torch.Tensor, list[AttentionCapture]]:
        B = z_t.shape[0]
        per_image = self.n_v * self.n_d
        if B % per_image:
            raise ValueError(f"batch {B} is not a multiple of n_v * n_d = {per_image}")
        t = self._timesteps(t, B)
        if bool((t < 1).any()):
            raise ValueError("timesteps must be >= 1")
        ref = condition.reference
        if ref.shape[0] != B:
            ref = ref.repeat_interleave(B // ref.shape[0], dim=0)
        # only the front-view color slot sees the reference; the rest must attend to it
        is_ref = (condition.view_index == 0) & (condition.domain_index == 0)
        ref = ref * is_ref.to(ref.dtype)[:, None, None, None]

        emb = self.time_mlp(timestep_embedding(t, self.config.width).to(self.dtype))
        emb = emb + self.view_emb(condition.view_index) + self.domain_emb(condition.domain_index)
        h = self.conv_in(torch.cat([z_t, ref], dim=1)) + self.pos
        s = self.latent_side
        captures = []
        for i, (res, attns) in enumerate(zip(self.res, self.attn)):
            h = res(h, emb)
            tokens = h.flatten(2).transpose(1, 2)  # row-major
            for attn in attns:
                tokens, m = attn(tokens)
                captures.append(
                    AttentionCapture(m, attn.kind, f"block{i}.{attn.kind.value}", s * s, attn.k)
                )
            h = tokens.transpose(1, 2).reshape(B, -1, s, s)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out, assign_resolution_ranks(captures)

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().to(torch.float64).contiguous().numpy().tobytes())
        return digest.hexdigest()


def build_toy_backend(config: ToyConfig | None = None) -> ToyMVDM:
    model = ToyMVDM(config)
    model.eval()
    return model


def save_weights(model: ToyMVDM, path: str | Path) -> None:
    blob = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": asdict(model.config),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: str | Path, dtype: torch.dtype | None = None) -> ToyMVDM:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version!r}")
    model = ToyMVDM(ToyConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    if dtype is not None:
        model.to(dtype)
    model.eval()
    return model


def capture_kinds(captures: Sequence[AttentionCapture]) -> list[AttentionKind]:
    return [c.kind for c in captures]
