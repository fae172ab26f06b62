"""Training and sampling for the toy backend."""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..backend import slot_indices
from ..errors import DivergedError
from .model import ToyMVDM
from .scenes import ProceduralScene

logger = logging.getLogger(__name__)

GRAD_CLIP = 1.0


def scene_tensors(
    scenes: Sequence[ProceduralScene], side: int, dtype=torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Inputs (N, 3, H, W) and slot targets (N * n_d * n_v, 3, H, W), domain-major."""
    grids = np.stack([s.render_domains(side) for s in scenes])  # (N, n_v, n_d, 3, H, W)
    targets = torch.as_tensor(grids, dtype=dtype).transpose(1, 2).contiguous()  # (N, n_d, n_v, ...)
    inputs = targets[:, 0, 0]
    return inputs, targets.flatten(0, 2)


def train_toy(
    backend: ToyMVDM,
    dataset: Sequence[ProceduralScene],
    epochs: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
) -> tuple[ToyMVDM, list[float]]:
    """Jointly fit the autoencoder and the front-view-conditioned denoiser.

    Each epoch is one shuffled pass over ``dataset``. The objective per batch is
    reconstruction MSE plus clean-latent MSE, which is the noise-prediction MSE
    weighted by the signal-to-noise ratio at t. The returned curve holds the
    per-epoch mean of that objective.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    curve: list[float] = []
    if epochs <= 0:
        return backend, curve

    cfg = backend.config
    per_image = cfg.n_v * cfg.n_d
    inputs, targets = scene_tensors(dataset, cfg.image_side, backend.dtype)
    targets = targets.view(len(dataset), per_image, *targets.shape[1:])
    view_idx, domain_idx = slot_indices(cfg.n_v, cfg.n_d)

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(backend.parameters(), lr=lr)
    backend.train()
    for epoch in range(epochs):
        order = torch.randperm(len(dataset), generator=gen)
        total, batches = 0.0, 0
        for start in range(0, len(dataset), batch_size):
            idx = order[start : start + batch_size]
            n = len(idx)
            imgs = targets[idx].flatten(0, 1)
            z_all = backend.encode(imgs)
            recon = F.mse_loss(backend.decode(z_all), imgs)

            z0 = z_all.detach()
            ref = z_all.view(n, per_image, *z_all.shape[1:])[:, 0]
            # one timestep per scene, shared by its slots as at sampling time
            t = torch.randint(1, cfg.t_max + 1, (n,), generator=gen).repeat_interleave(per_image)
            noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            z_t = backend.schedule.add_noise(z0, noise, t)
            cond = backend.embed_condition(view_idx.repeat(n), domain_idx.repeat(n), ref)
            x0, _ = backend.predict_x0(z_t, t, cond)
            loss = recon + F.mse_loss(x0, z0)

            if not torch.isfinite(loss):
                raise DivergedError(f"training loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(backend.parameters(), GRAD_CLIP)
            opt.step()
            total += loss.item()
            batches += 1
        curve.append(total / batches)
        if epoch % 20 == 0 or epoch == epochs - 1:
            logger.info("train epoch %d loss %.5f", epoch, curve[-1])
    backend.eval()
    return backend, curve


def ddim_timesteps(t_max: int, n_steps: int) -> list[int]:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    n_steps = min(n_steps, t_max)
    ts = np.linspace(t_max, 1, n_steps)
    return [int(round(t)) for t in ts]


@torch.no_grad()
def generate_views(
    backend: ToyMVDM, image: torch.Tensor, n_steps: int = 20, seed: int = 0
) -> torch.Tensor:
    """Deterministic DDIM sampling of every view/domain slot for one input image.

    Returns a (n_v, n_d, 3, H, W) tensor in [0, 1].
    """
    n_v, n_d = backend.n_v, backend.n_d
    ref = backend.encode(image)
    view_idx, domain_idx = slot_indices(n_v, n_d)
    cond = backend.embed_condition(view_idx, domain_idx, ref)
    gen = torch.Generator().manual_seed(seed)
    shape = (n_v * n_d, *ref.shape[1:])
    z = torch.randn(shape, generator=gen, dtype=torch.float64).to(ref.dtype)

    steps = ddim_timesteps(backend.t_max, n_steps)
    sched = backend.schedule
    for i, t in enumerate(steps):
        x0, _ = backend.predict_x0(z, t, cond)
        ab = float(sched.alpha_bar(t))
        ab_prev = float(sched.alpha_bar(steps[i + 1])) if i + 1 < len(steps) else 1.0
        eps = (z - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
    images = backend.decode(z)
    return images.view(n_d, n_v, *images.shape[1:]).transpose(0, 1).clamp(0, 1)
