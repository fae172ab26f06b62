"""Attention maps and foreground/background attention statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import (
    EmptyBackgroundError,
    EmptyForegroundError,
    NoCapturesError,
    ShapeMismatchError,
)
from .masks import AttentionKind, AttentionMask, ForegroundMask, build_attention_mask


@dataclass(frozen=True)
class AttentionCapture:
    """One softmax attention map recorded during a denoiser forward pass.

    ``map`` has shape (B, heads, D, D * k). It keeps its autograd history so
    losses built from it can be differentiated back to the input image.
    """

    map: torch.Tensor
    kind: AttentionKind
    layer_id: str
    D: int
    k: int
    resolution_rank: int = 0

    def __post_init__(self):
        if self.map.ndim != 4 or self.map.shape[-2:] != (self.D, self.D * self.k):
            raise ShapeMismatchError(
                f"capture {self.layer_id}: map shape {tuple(self.map.shape)} "
                f"does not match D={self.D}, k={self.k}"
            )

    @property
    def heads(self) -> int:
        return self.map.shape[1]

    def plane(self) -> torch.Tensor:
        """Map averaged over batch and heads, shape (D, D * k)."""
        return self.map.mean(dim=(0, 1))


@dataclass(frozen=True)
class LayerStats:
    layer_id: str
    kind: AttentionKind
    D: int
    t_f_mean: float
    t_b_mean: float


@dataclass
class AttentionStats:
    t_f_mean: float
    t_b_mean: float
    per_layer: list[LayerStats] = field(default_factory=list)

    def to_records(self) -> list[str]:
        return [
            f"{s.layer_id}\t{s.kind.value}\t{s.D}\t{s.t_f_mean:.9g}\t{s.t_b_mean:.9g}"
            for s in self.per_layer
        ]


def attention_map(Q: torch.Tensor, K: torch.Tensor, d: int | None = None) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d)) over the key axis.

    Q is (..., D, c) and K is (..., D * k, c); leading dims must agree.
    ``d`` defaults to the feature size c.
    """
    if Q.ndim < 2 or K.ndim != Q.ndim:
        raise ShapeMismatchError(f"Q {tuple(Q.shape)} and K {tuple(K.shape)} rank mismatch")
    if Q.shape[:-2] != K.shape[:-2] or Q.shape[-1] != K.shape[-1]:
        raise ShapeMismatchError(f"Q {tuple(Q.shape)} and K {tuple(K.shape)} do not conform")
    c = Q.shape[-1]
    if d is None:
        d = c
    if d <= 0:
        raise ShapeMismatchError(f"scale dimension d must be positive, got {d}")
    logits = (Q / math.sqrt(d)) @ K.transpose(-1, -2)
    return torch.softmax(logits, dim=-1)


def _mask_tensor(capture: AttentionCapture, mask: AttentionMask) -> torch.Tensor:
    plane_shape = (capture.D, capture.D * capture.k)
    if mask.grid.shape != plane_shape:
        raise ShapeMismatchError(
            f"mask shape {mask.grid.shape} does not match capture {capture.layer_id} plane {plane_shape}"
        )
    return torch.tensor(mask.grid, dtype=capture.map.dtype, device=capture.map.device)


def mean_scores(capture: AttentionCapture, mask: AttentionMask) -> tuple[float, float]:
    """Mean attention received per foreground entry and per background entry."""
    m = _mask_tensor(capture, mask)
    fg = m.sum()
    bg = (1 - m).sum()
    if fg == 0:
        raise EmptyForegroundError(f"mask for {capture.layer_id} has no foreground columns")
    if bg == 0:
        raise EmptyBackgroundError(f"mask for {capture.layer_id} has no background columns")
    with torch.no_grad():
        plane = capture.plane()
        t_f = (plane * m).sum() / fg
        t_b = (plane * (1 - m)).sum() / bg
    return float(t_f), float(t_b)


def foreground_mass(capture: AttentionCapture, mask: AttentionMask) -> torch.Tensor:
    """Total (unnormalized) attention mass on foreground entries. Differentiable."""
    return (capture.plane() * _mask_tensor(capture, mask)).sum()


def masks_for_captures(
    mask: ForegroundMask | np.ndarray,
    captures: Sequence[AttentionCapture],
    n_v: int,
    n_d: int,
) -> list[AttentionMask]:
    """Build one attention mask per capture, reusing masks across equal layouts."""
    cache: dict[tuple[int, AttentionKind], AttentionMask] = {}
    out = []
    for cap in captures:
        key = (cap.D, cap.kind)
        if key not in cache:
            cache[key] = build_attention_mask(mask, cap.D, cap.kind, n_v=n_v, n_d=n_d)
        if cache[key].k != cap.k:
            raise ShapeMismatchError(
                f"capture {cap.layer_id} reports k={cap.k}, backend layout implies {cache[key].k}"
            )
        out.append(cache[key])
    return out


def assign_resolution_ranks(captures: Sequence[AttentionCapture]) -> list[AttentionCapture]:
    """Return copies of ``captures`` with resolution_rank set (0 = smallest D)."""
    order = {D: i for i, D in enumerate(sorted({c.D for c in captures}))}
    return [
        AttentionCapture(c.map, c.kind, c.layer_id, c.D, c.k, order[c.D]) for c in captures
    ]


def aggregate_lowest_dim(
    captures: Sequence[AttentionCapture],
    masks: Sequence[AttentionMask],
) -> AttentionStats:
    """Average foreground/background scores over the lowest-resolution layers."""
    if not captures:
        raise NoCapturesError("no attention captures to aggregate")
    if len(masks) != len(captures):
        raise ShapeMismatchError(f"{len(captures)} captures but {len(masks)} masks")
    per_layer = [
        LayerStats(cap.layer_id, cap.kind, cap.D, *mean_scores(cap, mask))
        for cap, mask in zip(captures, masks)
        if cap.resolution_rank == 0
    ]
    if not per_layer:
        raise NoCapturesError("no capture has resolution_rank 0")
    t_f = sum(s.t_f_mean for s in per_layer) / len(per_layer)
    t_b = sum(s.t_b_mean for s in per_layer) / len(per_layer)
    return AttentionStats(t_f, t_b, per_layer)


def pool_stats(samples: Sequence[AttentionStats]) -> AttentionStats:
    """Pool several AttentionStats (e.g. one per sampled timestep) layer by layer."""
    if not samples:
        raise NoCapturesError("no samples to pool")
    layers: dict[str, list[LayerStats]] = {}
    for s in samples:
        for layer in s.per_layer:
            layers.setdefault(layer.layer_id, []).append(layer)
    per_layer = [
        LayerStats(
            rows[0].layer_id,
            rows[0].kind,
            rows[0].D,
            sum(r.t_f_mean for r in rows) / len(rows),
            sum(r.t_b_mean for r in rows) / len(rows),
        )
        for rows in layers.values()
    ]
    return AttentionStats(
        sum(s.t_f_mean for s in samples) / len(samples),
        sum(s.t_b_mean for s in samples) / len(samples),
        per_layer,
    )
