"""Foreground masks and their attention-shaped expansions.

A foreground mask lives at image resolution. Before it can be compared with an
attention map it is area-downscaled to the latent grid, flattened row-major into
one key row, replicated over every query row and finally tiled along the key
axis once per view (multi-view attention) or once per domain (cross-domain
attention).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    AllBackgroundError,
    AllForegroundError,
    MaskError,
    MissingAlphaError,
    NotPerfectSquareError,
    UpscaleRequestedError,
)

DEFAULT_COLOR_TOLERANCE = 0.1


class AttentionKind(str, enum.Enum):
    SELF = "self"
    MULTI_VIEW = "multi_view"
    CROSS_DOMAIN = "cross_domain"


class MaskSource(str, enum.Enum):
    ALPHA = "alpha_channel"
    COLOR = "color_threshold"
    FILE = "provided_file"


@dataclass(frozen=True)
class ForegroundMask:
    grid: np.ndarray
    source: MaskSource = MaskSource.FILE

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or grid.size == 0:
            raise MaskError(f"mask must be a nonempty 2-D grid, got shape {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise MaskError("mask entries must be 0 or 1")
        grid = grid.astype(np.uint8)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        _check_not_degenerate(grid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def foreground_fraction(self) -> float:
        return float(self.grid.mean())


@dataclass(frozen=True)
class AttentionMask:
    """Binary (D, D*k) mask. Rows index queries, columns index keys."""

    grid: np.ndarray
    kind: AttentionKind
    k: int
    D: int

    def __post_init__(self):
        if self.grid.shape != (self.D, self.D * self.k):
            raise MaskError(
                f"{self.kind.value} mask must have shape {(self.D, self.D * self.k)}, got {self.grid.shape}"
            )

    @property
    def column_mask(self) -> np.ndarray:
        return self.grid[0]


def _check_not_degenerate(grid: np.ndarray) -> None:
    if grid.all():
        raise AllForegroundError("mask has no background pixels")
    if not grid.any():
        raise AllBackgroundError("mask has no foreground pixels")


def _as_float_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.size == 0:
        raise MaskError("image is empty")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise MaskError(f"expected an H x W x C image, got shape {arr.shape}")
    return arr


def dominant_corner_color(rgb: np.ndarray, tolerance: float = DEFAULT_COLOR_TOLERANCE) -> np.ndarray:
    """Corner color agreed on by the most corners (first corner wins ties)."""
    h, w = rgb.shape[:2]
    corners = np.stack([rgb[0, 0], rgb[0, w - 1], rgb[h - 1, 0], rgb[h - 1, w - 1]])
    dist = _color_distance(corners[:, None, :], corners[None, :, :])
    votes = (dist <= tolerance).sum(axis=1)
    return corners[int(np.argmax(votes))]


def _color_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Euclidean RGB distance scaled so that black-to-white is 1.
    return np.sqrt(((a - b) ** 2).sum(axis=-1) / a.shape[-1])


def extract_foreground_mask(
    image,
    policy: str = "auto",
    tolerance: float = DEFAULT_COLOR_TOLERANCE,
) -> ForegroundMask:
    """Derive a foreground mask from an H x W x C image.

    ``policy`` is ``"alpha"`` (alpha > 0.5), ``"color"`` (pixels farther than
    ``tolerance`` from the dominant corner color are foreground) or ``"auto"``,
    which uses the alpha plane when the image has four channels.
    """
    arr = _as_float_image(image)
    has_alpha = arr.shape[2] in (2, 4)
    if policy == "auto":
        policy = "alpha" if has_alpha else "color"

    if policy == "alpha":
        if not has_alpha:
            raise MissingAlphaError("alpha policy requested but the image has no alpha plane")
        grid = (arr[..., -1] > 0.5).astype(np.uint8)
        source = MaskSource.ALPHA
    elif policy == "color":
        rgb = arr[..., :-1] if has_alpha else arr
        bg = dominant_corner_color(rgb, tolerance)
        grid = (_color_distance(rgb, bg) > tolerance).astype(np.uint8)
        source = MaskSource.COLOR
    else:
        raise MaskError(f"unknown mask policy {policy!r}")
    return ForegroundMask(grid, source)


def sequence_side(D: int) -> int:
    side = math.isqrt(D) if D > 0 else 0
    if D <= 0 or side * side != D:
        raise NotPerfectSquareError(f"sequence length {D} is not a perfect square")
    return side


def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    # weights[i, j] = fraction of destination cell i covered by source cell j
    edges = np.arange(n_dst + 1) * (n_src / n_dst)
    lo = np.maximum(edges[:-1, None], np.arange(n_src)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(1, n_src + 1)[None, :])
    return np.clip(hi - lo, 0.0, None) / (n_src / n_dst)


def downscale_mask(mask: ForegroundMask | np.ndarray, D: int) -> np.ndarray:
    """Area-average the mask onto a sqrt(D) x sqrt(D) grid, threshold at >= 0.5."""
    grid = mask.grid if isinstance(mask, ForegroundMask) else np.asarray(mask)
    side = sequence_side(D)
    h, w = grid.shape
    if side > min(h, w):
        raise UpscaleRequestedError(f"cannot downscale a {h}x{w} mask to {side}x{side}")
    if (h, w) == (side, side):
        return grid.astype(np.uint8)
    avg = _area_weights(h, side) @ grid.astype(np.float64) @ _area_weights(w, side).T
    # ties at exactly 0.5 go to foreground; absorb rounding from the weights
    return (avg >= 0.5 - 1e-9).astype(np.uint8)


def key_factor(kind: AttentionKind, n_v: int, n_d: int) -> int:
    kind = AttentionKind(kind)
    if kind is AttentionKind.SELF:
        return 1
    if kind is AttentionKind.MULTI_VIEW:
        return n_v
    return n_d


def build_attention_mask(
    mask: ForegroundMask | np.ndarray,
    D: int,
    kind: AttentionKind | str = AttentionKind.SELF,
    n_v: int = 1,
    n_d: int = 1,
) -> AttentionMask:
    if n_v < 1 or n_d < 1:
        raise MaskError(f"n_v and n_d must be >= 1, got {n_v}, {n_d}")
    kind = AttentionKind(kind)
    row = downscale_mask(mask, D).reshape(1, D)
    plane = np.repeat(row, D, axis=0)
    k = key_factor(kind, n_v, n_d)
    grid = np.tile(plane, (1, k))
    grid.setflags(write=False)
    return AttentionMask(grid=grid, kind=kind, k=k, D=D)


def load_mask(path: str | Path) -> ForegroundMask:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return ForegroundMask((arr >= 128).astype(np.uint8), MaskSource.FILE)


def save_mask(mask: ForegroundMask, path: str | Path) -> None:
    Image.fromarray((mask.grid * 255).astype(np.uint8), mode="L").save(path)
