"""Image-quality and geometry metrics: SSIM, Chamfer distance, perceptual slot."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.signal import correlate2d

from .errors import EmptyCloudError, ShapeMismatchError, TooSmallError

LUMA = np.array([0.299, 0.587, 0.114])
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
CHAMFER_DEFINITION = "mean squared nearest-neighbour distance, summed over both directions"


def to_gray(image) -> np.ndarray:
    """Accept (H, W), (H, W, 3) or (3, H, W) arrays and return luma (H, W)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[-1] in (3, 4):
        return arr[..., :3] @ LUMA
    if arr.ndim == 3 and arr.shape[0] in (3, 4):
        return np.tensordot(LUMA, arr[:3], axes=1)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        return arr[..., 0]
    if arr.ndim == 3 and arr.shape[0] == 1:
        return arr[0]
    raise ShapeMismatchError(f"cannot interpret image of shape {arr.shape}")


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5)."""
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image sizes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < WINDOW_SIZE:
        raise TooSmallError(f"image {a.shape} is smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} window")
    w = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2

    def filt(x):
        return correlate2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatchError(f"point cloud must be (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise EmptyCloudError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        raise EmptyCloudError("point cloud is empty")
    return PointCloud(pts).points


def _nearest_sq(p: np.ndarray, q: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(p))
    for s in range(0, len(p), chunk):
        diff = p[s : s + chunk, None, :] - q[None, :, :]
        out[s : s + chunk] = (diff**2).sum(axis=-1).min(axis=1)
    return out


def chamfer_distance(p, q) -> float:
    """Symmetric Chamfer distance with squared Euclidean nearest neighbours."""
    p, q = _as_points(p), _as_points(q)
    return float(_nearest_sq(p, q).mean() + _nearest_sq(q, p).mean())


def load_point_cloud(path: str | Path) -> PointCloud:
    """Read ASCII XYZ (one ``x y z`` per line) or an ASCII PLY vertex list."""
    text = Path(path).read_text().splitlines()
    if text and text[0].strip() == "ply":
        return PointCloud(_parse_ply(text))
    rows = [line.split()[:3] for line in text if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise EmptyCloudError(f"{path} contains no points")
    return PointCloud(np.array(rows, dtype=np.float64))


def _parse_ply(lines: list[str]) -> np.ndarray:
    n_vertex, props, in_vertex = 0, [], False
    body = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"only ascii PLY is supported, got {tok[1]}")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = i + 1
            break
    if body is None:
        raise ValueError("PLY header has no end_header")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise ValueError("PLY vertex element lacks x, y, z properties") from None
    rows = [lines[body + j].split() for j in range(n_vertex)]
    if not rows:
        raise EmptyCloudError("PLY has no vertices")
    return np.array([[r[c] for c in cols] for r in rows], dtype=np.float64)


def save_point_cloud(cloud: PointCloud, path: str | Path) -> None:
    np.savetxt(path, cloud.points, fmt="%.9g")


# -- perceptual distance -------------------------------------------------------

class PerceptualAdapter(Protocol):
    """External perceptual metric (e.g. a pretrained LPIPS network)."""

    name: str

    def __call__(self, a: np.ndarray, b: np.ndarray) -> float:
        ...


SURROGATE_NAME = "grad-orientation-histogram-l1"
_SURROGATE_SCALES = (1, 2, 4)
_SURROGATE_CELLS = 4
_SURROGATE_BINS = 8

_registered_adapter: PerceptualAdapter | None = None


def register_perceptual_adapter(adapter: PerceptualAdapter | None) -> None:
    global _registered_adapter
    _registered_adapter = adapter


def active_perceptual(adapter: PerceptualAdapter | None = None) -> tuple[str, bool]:
    """(metric identifier, is_surrogate) for the adapter that would be used."""
    adapter = adapter or _registered_adapter
    if adapter is None:
        return SURROGATE_NAME, True
    return adapter.name, False


def _pool(x: np.ndarray, f: int) -> np.ndarray:
    h, w = (x.shape[0] // f) * f, (x.shape[1] // f) * f
    return x[:h, :w].reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def _orientation_histogram(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * _SURROGATE_BINS).astype(int), _SURROGATE_BINS - 1)
    h, w = gray.shape
    rows = np.minimum(np.arange(h) * _SURROGATE_CELLS // h, _SURROGATE_CELLS - 1)
    cols = np.minimum(np.arange(w) * _SURROGATE_CELLS // w, _SURROGATE_CELLS - 1)
    cell = rows[:, None] * _SURROGATE_CELLS + cols[None, :]
    hist = np.zeros(_SURROGATE_CELLS**2 * _SURROGATE_BINS)
    np.add.at(hist, (cell * _SURROGATE_BINS + bins).ravel(), mag.ravel())
    return hist / (mag.sum() + 1e-12)


def surrogate_perceptual(a, b) -> float:
    """Multi-scale, cell-wise gradient orientation histograms weighted by
    gradient magnitude; returns the mean L1 distance across scales.

    This is NOT LPIPS. It is reported with ``surrogate=true``.
    """
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image sizes differ: {a.shape} vs {b.shape}")
    dists = []
    for f in _SURROGATE_SCALES:
        if f > 1 and min(a.shape) // f < 2 * _SURROGATE_CELLS:
            continue
        pa, pb = _pool(a, f), _pool(b, f)
        dists.append(np.abs(_orientation_histogram(pa) - _orientation_histogram(pb)).sum())
    return float(np.mean(dists))


def perceptual_distance(a, b, adapter: PerceptualAdapter | None = None) -> float:
    a_arr, b_arr = np.asarray(a), np.asarray(b)
    if a_arr.shape != b_arr.shape:
        raise ShapeMismatchError(f"image sizes differ: {a_arr.shape} vs {b_arr.shape}")
    adapter = adapter or _registered_adapter
    if adapter is not None:
        return float(adapter(a_arr, b_arr))
    return surrogate_perceptual(a_arr, b_arr)


# -- reports -------------------------------------------------------------------

@dataclass
class ViewScore:
    view_id: int
    domain_id: int
    ssim: float
    perceptual: float


@dataclass
class MetricsReport:
    per_view: list[ViewScore] = field(default_factory=list)
    ssim_mean: float = float("nan")
    perceptual_mean: float = float("nan")
    perceptual_metric: str = SURROGATE_NAME
    surrogate: bool = True
    chamfer: float | None = None
    chamfer_definition: str = CHAMFER_DEFINITION

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_views(
    generated,
    ground_truth,
    adapter: PerceptualAdapter | None = None,
    clouds: tuple | None = None,
    workers: int = 1,
) -> MetricsReport:
    """Score a (n_v, n_d, ...) grid of generated images against ground truth.

    ``workers > 1`` scores views on a thread pool; results keep grid order.
    """
    gen = np.asarray(generated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if gen.shape != gt.shape:
        raise ShapeMismatchError(f"generated grid {gen.shape} vs ground truth {gt.shape}")
    name, is_surrogate = active_perceptual(adapter)

    def score(vd):
        v, d = vd
        return ViewScore(v, d, ssim(gen[v, d], gt[v, d]), perceptual_distance(gen[v, d], gt[v, d], adapter))

    cells = [(v, d) for v in range(gen.shape[0]) for d in range(gen.shape[1])]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, cells))
    else:
        rows = [score(c) for c in cells]
    report = MetricsReport(
        per_view=rows,
        ssim_mean=float(np.mean([r.ssim for r in rows])),
        perceptual_mean=float(np.mean([r.perceptual for r in rows])),
        perceptual_metric=name,
        surrogate=is_surrogate,
    )
    if clouds is not None:
        report.chamfer = chamfer_distance(*clouds)
    return report


def mean_view_ssim(generated: Sequence, ground_truth: Sequence, reduce: Callable = np.mean) -> float:
    gen = np.asarray(generated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    return float(reduce([ssim(g, t) for g, t in zip(gen.reshape(-1, *gen.shape[-3:]), gt.reshape(-1, *gt.shape[-3:]))]))
