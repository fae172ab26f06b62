"""8-bit image files <-> float arrays and tensors."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import MissingArtifactError


def load_image(path: str | Path) -> np.ndarray:
    """Read an image as float64 (H, W, C) in [0, 1]; keeps an alpha plane if present."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"image {path} does not exist")
    with Image.open(path) as img:
        mode = "RGBA" if img.mode in ("RGBA", "LA", "PA") or "transparency" in img.info else "RGB"
        arr = np.asarray(img.convert(mode))
    return arr.astype(np.float64) / 255.0


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) array -> (3, H, W) RGB tensor."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return torch.as_tensor(np.ascontiguousarray(arr[..., :3].transpose(2, 0, 1)), dtype=dtype)


def to_uint8(image) -> np.ndarray:
    """(3, H, W) tensor or (H, W, C) array in [0, 1] -> (H, W, C) uint8."""
    if isinstance(image, torch.Tensor):
        arr = image.detach().cpu().to(torch.float64).numpy()
        if arr.ndim == 4:
            arr = arr[0]
        arr = arr.transpose(1, 2, 0)
    else:
        arr = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)


def save_image(image, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)
    return path


def view_filename(view: int, domain: int) -> str:
    return f"view{view}_domain{domain}.png"


def save_view_grid(grid, directory: str | Path) -> list[Path]:
    """Write a (n_v, n_d, 3, H, W) grid as ``view{v}_domain{d}.png`` files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid = torch.as_tensor(np.asarray(grid)) if not isinstance(grid, torch.Tensor) else grid
    paths = []
    for v in range(grid.shape[0]):
        for d in range(grid.shape[1]):
            paths.append(save_image(grid[v, d], directory / view_filename(v, d)))
    return paths


def load_view_grid(directory: str | Path) -> np.ndarray:
    """Read ``view{v}_domain{d}.png`` files back into a (n_v, n_d, 3, H, W) array."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifactError(f"view directory {directory} does not exist")
    files = sorted(directory.glob("view*_domain*.png"))
    if not files:
        raise MissingArtifactError(f"no view*_domain*.png files in {directory}")
    keys = []
    for f in files:
        v, d = f.stem[len("view") :].split("_domain")
        keys.append((int(v), int(d)))
    n_v = max(k[0] for k in keys) + 1
    n_d = max(k[1] for k in keys) + 1
    grid = None
    for (v, d), f in zip(keys, files):
        img = load_image(f)[..., :3].transpose(2, 0, 1)
        if grid is None:
            grid = np.full((n_v, n_d, *img.shape), np.nan)
        grid[v, d] = img
    if np.isnan(grid).any():
        raise MissingArtifactError(f"incomplete view grid in {directory}")
    return grid
