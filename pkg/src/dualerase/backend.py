"""The contract a multi-view diffusion model must satisfy to be attacked.

Batch layout: the working batch holds ``n_v * n_d`` latent slots per input
image, ordered domain-major so the view index cycles fastest
(slot = domain * n_v + view). Latent tokens are flattened row-major.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Protocol, Sequence, runtime_checkable

import torch

from .attention import AttentionCapture


class NoiseSchedule:
    """Linear-beta DDPM forward process over timesteps 1..t_max.

    The default betas are the usual 1e-4..2e-2 thousand-step range rescaled by
    1000 / t_max, so that the last timestep is (almost) pure noise.
    """

    name = "linear"

    def __init__(self, t_max: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2):
        if t_max < 1:
            raise ValueError("t_max must be >= 1")
        self.t_max = t_max
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = torch.linspace(beta_start, beta_end, t_max, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)

    def alpha_bar(self, t) -> torch.Tensor:
        """Cumulative signal fraction at timestep t (t = 0 means clean)."""
        t = torch.as_tensor(t, dtype=torch.long)
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod])
        return padded[t]

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t) -> torch.Tensor:
        """Sample q(z_t | z_0) given the Gaussian draw ``noise``.

        ``t`` is an int or a per-sample tensor of shape (B,).
        """
        ab = self.alpha_bar(t).to(z0.dtype)
        if ab.ndim == 1:
            ab = ab.view(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise

    def describe(self) -> dict:
        return {
            "name": self.name,
            "t_max": self.t_max,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


@dataclass
class SlotBatch:
    """Latents expanded to the backend's working batch plus per-slot conditioning."""

    latents: torch.Tensor
    view_index: torch.Tensor
    domain_index: torch.Tensor
    condition: Any


@runtime_checkable
class ModelBackend(Protocol):
    identifier: str
    n_v: int
    n_d: int
    latent_side: int
    flatten_order: str
    t_max: int
    schedule: NoiseSchedule

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        ...

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        ...

    def embed_condition(
        self, view_index: torch.Tensor, domain_index: torch.Tensor, reference: torch.Tensor
    ) -> Any:
        ...

    def denoise_with_capture(
        self, z_t: torch.Tensor, t, condition: Any
    ) -> tuple[torch.Tensor, Sequence[AttentionCapture]]:
        ...


def slot_indices(n_v: int, n_d: int) -> tuple[torch.Tensor, torch.Tensor]:
    slots = torch.arange(n_v * n_d)
    return slots % n_v, slots // n_v


def expand_batch(z: torch.Tensor, backend: ModelBackend) -> SlotBatch:
    """Replicate one encoded latent (1, C, s, s) into the n_v * n_d slot batch."""
    if z.ndim == 3:
        z = z.unsqueeze(0)
    if z.shape[0] != 1:
        raise ValueError(f"expand_batch takes a single latent, got batch {z.shape[0]}")
    view_index, domain_index = slot_indices(backend.n_v, backend.n_d)
    n = backend.n_v * backend.n_d
    latents = z.expand(n, *z.shape[1:])
    condition = backend.embed_condition(view_index, domain_index, z)
    return SlotBatch(latents, view_index, domain_index, condition)
