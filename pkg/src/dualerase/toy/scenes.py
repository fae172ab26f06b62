"""Procedural multi-view scenes: flat shapes seen under planar rotations."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("square", "triangle", "disc")
BACKGROUND = (1.0, 1.0, 1.0)
_SUPERSAMPLE = 4


def default_azimuths(n_v: int) -> tuple[float, ...]:
    return tuple(90.0 * v / n_v for v in range(n_v))


@dataclass(frozen=True)
class ProceduralScene:
    shape: str
    color: tuple[float, float, float]
    size: float = 0.3
    angle: float = 0.0
    azimuths: tuple[float, ...] = field(default_factory=lambda: default_azimuths(4))

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")

    def coverage(self, azimuth: float, side: int) -> np.ndarray:
        """Fraction of each pixel covered by the shape, (side, side) in [0, 1]."""
        n = side * _SUPERSAMPLE
        c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
        x, y = np.meshgrid(c, -c)
        theta = np.deg2rad(self.angle + azimuth)
        # rotate sample points by -theta instead of rotating the shape
        u = np.cos(theta) * x + np.sin(theta) * y
        v = -np.sin(theta) * x + np.cos(theta) * y
        r = self.size * 2.0
        if self.shape == "square":
            inside = (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
        elif self.shape == "disc":
            inside = u**2 + v**2 <= r**2
        else:
            inside = np.ones_like(u, dtype=bool)
            for k in range(3):
                phi = np.pi / 2 + 2 * np.pi * k / 3
                # half-plane bounded by the edge opposite vertex k
                inside &= -(np.cos(phi) * u + np.sin(phi) * v) <= r / 2
        cov = inside.reshape(side, _SUPERSAMPLE, side, _SUPERSAMPLE).mean(axis=(1, 3))
        return cov

    def render(self, view: int, side: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Color image (H, W, 3) and binary silhouette (H, W) for one view."""
        cov = self.coverage(self.azimuths[view], side)[..., None]
        color = np.asarray(self.color)[None, None, :]
        bg = np.asarray(BACKGROUND)[None, None, :]
        rgb = bg * (1 - cov) + color * cov
        return rgb, (cov[..., 0] >= 0.5).astype(np.float64)

    def render_rgba(self, view: int = 0, side: int = 32) -> np.ndarray:
        rgb, sil = self.render(view, side)
        return np.concatenate([rgb, sil[..., None]], axis=-1)

    def render_domains(self, side: int = 32) -> np.ndarray:
        """Ground-truth grid (n_v, n_d=2, 3, side, side): color, then silhouette."""
        out = []
        for v in range(len(self.azimuths)):
            rgb, sil = self.render(v, side)
            out.append(np.stack([rgb.transpose(2, 0, 1), np.repeat(sil[None], 3, axis=0)]))
        return np.stack(out)


def random_scene(rng: np.random.Generator, n_v: int = 4, shape: str | None = None) -> ProceduralScene:
    hue = rng.uniform()
    sat = rng.uniform(0.6, 1.0)
    val = rng.uniform(0.45, 0.9)
    return ProceduralScene(
        shape=shape or SHAPES[int(rng.integers(len(SHAPES)))],
        color=tuple(float(c) for c in colorsys.hsv_to_rgb(hue, sat, val)),
        size=float(rng.uniform(0.22, 0.34)),
        angle=float(rng.uniform(0.0, 360.0)),
        azimuths=default_azimuths(n_v),
    )


def make_dataset(n_scenes: int, seed: int = 0, n_v: int = 4) -> list[ProceduralScene]:
    rng = np.random.default_rng(seed)
    return [random_scene(rng, n_v) for _ in range(n_scenes)]


def save_scenes(scenes: list[ProceduralScene], directory: str | Path, side: int = 32) -> Path:
    """Write every view/domain render as PNG plus a ``scenes.txt`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# scene_id shape r g b size angle azimuths"]
    for i, scene in enumerate(scenes):
        grid = scene.render_domains(side)
        for v in range(grid.shape[0]):
            for d in range(grid.shape[1]):
                img = (grid[v, d].transpose(1, 2, 0) * 255).round().astype(np.uint8)
                Image.fromarray(img).save(directory / f"scene{i:04d}_view{v}_domain{d}.png")
        az = ",".join(f"{a:.6g}" for a in scene.azimuths)
        r, g, b = scene.color
        lines.append(f"{i} {scene.shape} {r:.9g} {g:.9g} {b:.9g} {scene.size:.9g} {scene.angle:.9g} {az}")
    index = directory / "scenes.txt"
    index.write_text("\n".join(lines) + "\n")
    return index


def load_scenes(index: str | Path) -> list[ProceduralScene]:
    scenes = []
    for line in Path(index).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        _, shape, r, g, b, size, angle, az = line.split()
        scenes.append(
            ProceduralScene(
                shape=shape,
                color=(float(r), float(g), float(b)),
                size=float(size),
                angle=float(angle),
                azimuths=tuple(float(a) for a in az.split(",")),
            )
        )
    return scenes
