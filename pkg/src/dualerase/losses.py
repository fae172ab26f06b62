"""Feature erasure, attention erasure and the combined dual erasure loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .attention import AttentionCapture, foreground_mass
from .errors import NoCapturesError, ShapeMismatchError
from .masks import AttentionMask


@dataclass
class LossBreakdown:
    l_fe: torch.Tensor | float
    l_ae: torch.Tensor | float
    l_de: torch.Tensor | float
    alpha: float
    n_maps: int = 0

    def as_floats(self) -> dict[str, float]:
        def val(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return {
            "l_fe": val(self.l_fe),
            "l_ae": val(self.l_ae),
            "l_de": val(self.l_de),
            "alpha": float(self.alpha),
            "n_maps": int(self.n_maps),
        }


def feature_erasure_loss(z_adv: torch.Tensor, z_clean: torch.Tensor) -> torch.Tensor:
    """Negative mean squared deviation of the adversarial latent from the clean one.

    The clean latent is a constant target; no gradient flows into it.
    """
    if z_adv.shape != z_clean.shape:
        raise ShapeMismatchError(f"latent shapes differ: {tuple(z_adv.shape)} vs {tuple(z_clean.shape)}")
    return -((z_adv - z_clean.detach()) ** 2).mean()


def attention_erasure_loss(
    captures: Sequence[AttentionCapture],
    masks: Sequence[AttentionMask],
) -> torch.Tensor:
    """Foreground attention mass, averaged over the given captures."""
    if not captures:
        raise NoCapturesError("attention erasure loss needs at least one capture")
    if len(masks) != len(captures):
        raise ShapeMismatchError(f"{len(captures)} captures but {len(masks)} masks")
    total = sum(foreground_mass(cap, mask) for cap, mask in zip(captures, masks))
    return total / len(captures)


def dual_loss(l_ae, l_fe, alpha: float = 1.0, n_maps: int = 0) -> LossBreakdown:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return LossBreakdown(l_fe=l_fe, l_ae=l_ae, l_de=l_ae + alpha * l_fe, alpha=alpha, n_maps=n_maps)
