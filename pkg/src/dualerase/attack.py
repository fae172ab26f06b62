"""Projected signed-gradient optimization of the dual erasure loss."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attention import (
    AttentionCapture,
    AttentionStats,
    aggregate_lowest_dim,
    masks_for_captures,
    pool_stats,
)
from .backend import ModelBackend, expand_batch
from .errors import BackendFailure, ConfigError, NonFiniteLossError, NoCapturesError
from .losses import attention_erasure_loss, dual_loss, feature_erasure_loss
from .masks import AttentionMask, ForegroundMask

logger = logging.getLogger(__name__)

ATTENTION_LAYER_CHOICES = ("all", "lowest", "none")
REDUCTIONS = {
    "feature_erasure": "mean over latent elements",
    "attention_erasure": "sum over (query, key), mean over batch/heads, mean over captures",
}


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16.0
    alpha: float = 1.0
    max_epoch: int = 100
    step_size: float = 2.0
    seed: int = 0
    attention_layers: str = "all"
    timestep_sampler: str = "uniform"
    denoise_steps_eval: int = 20

    def __post_init__(self):
        if self.max_epoch < 1:
            raise ConfigError("attack.max_epoch", f"must be >= 1, got {self.max_epoch}")
        if not 0 < self.step_size <= self.epsilon:
            raise ConfigError(
                "attack.step_size", f"must satisfy 0 < step_size <= epsilon ({self.epsilon}), got {self.step_size}"
            )
        if self.alpha < 0:
            raise ConfigError("attack.alpha", f"must be >= 0, got {self.alpha}")
        if self.attention_layers not in ATTENTION_LAYER_CHOICES:
            raise ConfigError(
                "attack.attention_layers", f"must be one of {ATTENTION_LAYER_CHOICES}, got {self.attention_layers!r}"
            )
        if self.timestep_sampler != "uniform":
            raise ConfigError("attack.timestep_sampler", f"only 'uniform' is supported, got {self.timestep_sampler!r}")
        if self.denoise_steps_eval < 1:
            raise ConfigError("attack.denoise_steps_eval", f"must be >= 1, got {self.denoise_steps_eval}")

    @property
    def eps(self) -> float:
        """Perturbation bound in [0, 1] pixel units."""
        return self.epsilon / 255.0

    @property
    def step(self) -> float:
        return self.step_size / 255.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    t_sampled: int
    l_fe: float
    l_ae: float
    l_de: float
    t_f_mean: float
    t_b_mean: float
    linf_delta: float
    adv_min: float
    adv_max: float


@dataclass
class AttackTrace:
    config: AttackConfig
    records: list[EpochRecord] = field(default_factory=list)
    delta: torch.Tensor | None = None

    def __len__(self):
        return len(self.records)

    def header(self, image_hash: str | None = None, extra: dict | None = None) -> dict:
        head = {"type": "header", "config": self.config.to_dict(), "reductions": REDUCTIONS}
        if image_hash is not None:
            head["image_sha256"] = image_hash
        head.update(extra or {})
        return head

    def write(self, path: str | Path, image_hash: str | None = None, extra: dict | None = None) -> Path:
        lines = [json.dumps(self.header(image_hash, extra), sort_keys=True)]
        lines += [json.dumps({"type": "epoch", **asdict(r)}, sort_keys=True) for r in self.records]
        path = Path(path)
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> tuple["AttackTrace", dict]:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        trace = cls(AttackConfig(**header["config"]))
        for line in lines[1:]:
            row = json.loads(line)
            row.pop("type")
            trace.records.append(EpochRecord(**row))
        return trace, header


def image_sha256(image: torch.Tensor | np.ndarray) -> str:
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    digest = hashlib.sha256(str(arr.shape).encode())
    digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()


def select_captures(
    captures: Sequence[AttentionCapture], masks: Sequence[AttentionMask], which: str
) -> tuple[list[AttentionCapture], list[AttentionMask]]:
    if which == "none":
        return [], []
    pairs = [(c, m) for c, m in zip(captures, masks) if which == "all" or c.resolution_rank == 0]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _as_batch(image) -> torch.Tensor:
    x = torch.as_tensor(image)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one (3, H, W) image, got shape {tuple(x.shape)}")
    return x


def _project(delta: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    # intersection of the eps-ball with the box keeping x + delta in [0, 1]
    return torch.maximum(torch.minimum(delta, torch.clamp(1 - x, max=eps)), torch.clamp(-x, min=-eps))


def forward_captures(
    backend: ModelBackend,
    image: torch.Tensor,
    t: int,
    noise: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, list[AttentionCapture]]:
    """encode -> expand to slots -> noise to t -> denoise. Returns (z, eps_pred, captures)."""
    z = backend.encode(image)
    batch = expand_batch(z, backend)
    z_t = backend.schedule.add_noise(batch.latents, noise.to(z.dtype), t)
    try:
        pred, captures = backend.denoise_with_capture(z_t, t, batch.condition)
    except Exception as exc:  # surface as a backend failure with context
        raise BackendFailure(f"denoise_with_capture failed at t={t}: {exc}") from exc
    captures = list(captures)
    if not captures:
        raise BackendFailure("backend returned no attention captures")
    return z, pred, captures


def slot_noise_shape(backend: ModelBackend, z: torch.Tensor) -> tuple[int, ...]:
    return (backend.n_v * backend.n_d, *z.shape[1:])


def dual_objective(
    backend: ModelBackend,
    x_adv: torch.Tensor,
    z_clean: torch.Tensor,
    mask: ForegroundMask,
    t: int,
    noise: torch.Tensor,
    config: AttackConfig,
):
    """One evaluation of the dual loss. Returns (LossBreakdown, AttentionStats)."""
    z, _, captures = forward_captures(backend, x_adv, t, noise)
    masks = masks_for_captures(mask, captures, backend.n_v, backend.n_d)
    l_fe = feature_erasure_loss(z, z_clean)
    used, used_masks = select_captures(captures, masks, config.attention_layers)
    l_ae = attention_erasure_loss(used, used_masks) if used else torch.zeros((), dtype=l_fe.dtype)
    breakdown = dual_loss(l_ae, l_fe, config.alpha, n_maps=len(used))
    return breakdown, aggregate_lowest_dim(captures, masks)


def run_attack(
    backend: ModelBackend,
    image,
    mask: ForegroundMask,
    config: AttackConfig | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[torch.Tensor, AttackTrace]:
    """Optimize an L-inf bounded perturbation that minimizes the dual erasure loss.

    Each epoch samples one timestep uniformly from [1, t_max] and fresh
    Gaussian noise, steps delta against the sign of the loss gradient, and
    projects back into the eps-ball (and the valid pixel box).
    """
    config = config or AttackConfig()
    x = _as_batch(image).to(backend_dtype(backend))
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image must lie in [0, 1]")
    gen = torch.Generator().manual_seed(config.seed)
    eps, step = config.eps, config.step

    delta = (torch.rand(x.shape, generator=gen, dtype=torch.float64) * 2 - 1).to(x.dtype) * eps
    delta = _project(delta, x, eps)
    with torch.no_grad():
        z_clean = backend.encode(x)
    noise_shape = slot_noise_shape(backend, z_clean)

    trace = AttackTrace(config)
    for epoch in range(config.max_epoch):
        t = int(torch.randint(1, backend.t_max + 1, (1,), generator=gen))
        noise = torch.randn(noise_shape, generator=gen, dtype=torch.float64).to(x.dtype)

        delta.requires_grad_(True)
        x_adv = torch.clamp(x + delta, 0, 1)
        breakdown, stats = dual_objective(backend, x_adv, z_clean, mask, t, noise, config)
        if not torch.isfinite(torch.as_tensor(breakdown.l_de)):
            trace.delta = delta.detach()
            raise NonFiniteLossError(f"dual loss is not finite at epoch {epoch}", trace)
        (grad,) = torch.autograd.grad(breakdown.l_de, delta)

        with torch.no_grad():
            delta = _project(delta.detach() - step * grad.sign(), x, eps)
            adv = x + delta
        vals = breakdown.as_floats()
        record = EpochRecord(
            epoch=epoch,
            t_sampled=t,
            l_fe=vals["l_fe"],
            l_ae=vals["l_ae"],
            l_de=vals["l_de"],
            t_f_mean=stats.t_f_mean,
            t_b_mean=stats.t_b_mean,
            linf_delta=float(delta.abs().max()),
            adv_min=float(adv.min()),
            adv_max=float(adv.max()),
        )
        trace.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if epoch % 20 == 0:
            logger.debug("epoch %d t=%d l_de=%.5f t_f=%.5f", epoch, t, record.l_de, record.t_f_mean)

    trace.delta = delta.detach()
    return torch.clamp(x + delta, 0, 1).detach(), trace


def backend_dtype(backend) -> torch.dtype:
    return getattr(backend, "dtype", torch.float32)


def quantize_8bit(image: torch.Tensor) -> torch.Tensor:
    return torch.round(image.clamp(0, 1) * 255) / 255


@torch.no_grad()
def profile_attention(
    backend: ModelBackend,
    image,
    mask: ForegroundMask,
    n_samples: int = 10,
    seed: int = 0,
) -> tuple[AttentionStats, list[tuple[int, AttentionStats]]]:
    """Foreground/background attention statistics over sampled timesteps.

    Returns the statistics pooled over samples (and, within each sample, over
    lowest-resolution layers) plus the per-sample breakdown.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = _as_batch(image).to(backend_dtype(backend))
    gen = torch.Generator().manual_seed(seed)
    samples = []
    noise_shape = None
    for _ in range(n_samples):
        t = int(torch.randint(1, backend.t_max + 1, (1,), generator=gen))
        if noise_shape is None:
            noise_shape = slot_noise_shape(backend, backend.encode(x))
        noise = torch.randn(noise_shape, generator=gen, dtype=torch.float64).to(x.dtype)
        _, _, captures = forward_captures(backend, x, t, noise)
        masks = masks_for_captures(mask, captures, backend.n_v, backend.n_d)
        samples.append((t, aggregate_lowest_dim(captures, masks)))
    if not samples:
        raise NoCapturesError("no samples collected")
    return pool_stats([s for _, s in samples]), samples
