"""Input-preprocessing defenses: bit-depth squeezing and median smoothing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadBitsError, BadKernelError, ConfigError

PADDING_MODE = "reflect"  # mirror without repeating the edge pixel


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    bits: int = 4
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in ("squeeze", "smooth"):
            raise ConfigError("defense.kind", f"unknown defense {self.kind!r}")
        if not 1 <= self.bits <= 8:
            raise BadBitsError(f"bits must be in [1, 8], got {self.bits}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise BadKernelError(f"kernel must be odd and >= 3, got {self.kernel}")

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        """Parse ``squeeze:bits=4`` or ``smooth:kernel=3``."""
        kind, _, rest = text.partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            if not eq or key not in ("bits", "kernel"):
                raise ConfigError("defense", f"cannot parse parameter {item!r} in {text!r}")
            try:
                params[key] = int(value)
            except ValueError:
                raise ConfigError("defense", f"{key} must be an integer, got {value!r}") from None
        return cls(kind.strip(), **params)

    def __str__(self) -> str:
        if self.kind == "squeeze":
            return f"squeeze:bits={self.bits}"
        return f"smooth:kernel={self.kernel}"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "spec": str(self)}
        if self.kind == "squeeze":
            d["bits"] = self.bits
        else:
            d["kernel"] = self.kernel
            d["padding"] = PADDING_MODE
        return d

    def apply(self, image):
        if self.kind == "squeeze":
            return bit_depth_squeeze(image, self.bits)
        return median_smooth(image, self.kernel)


def bit_depth_squeeze(image, bits: int = 4):
    """Quantize every channel to 2**bits levels, rounding halves up."""
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 8:
        raise BadBitsError(f"bits must be an integer in [1, 8], got {bits}")
    levels = 2**bits - 1
    if isinstance(image, torch.Tensor):
        return torch.floor(image * levels + 0.5) / levels
    return np.floor(np.asarray(image, dtype=np.float64) * levels + 0.5) / levels


def _median_hw(plane: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    padded = np.pad(plane, pad, mode=PADDING_MODE)
    windows = sliding_window_view(padded, (kernel, kernel))
    return np.median(windows.reshape(*windows.shape[:2], -1), axis=-1)


def median_smooth(image, kernel: int = 3):
    """Per-channel sliding-window median with reflect padding.

    Accepts (H, W), (H, W, C) numpy arrays or (C, H, W) / (B, C, H, W) tensors.
    """
    if not isinstance(kernel, (int, np.integer)) or kernel < 3 or kernel % 2 == 0:
        raise BadKernelError(f"kernel must be an odd integer >= 3, got {kernel}")
    if isinstance(image, torch.Tensor):
        arr = image.detach().cpu().numpy()
        lead = arr.shape[:-2]
        flat = arr.reshape(-1, *arr.shape[-2:])
        _check_kernel(kernel, flat.shape[-2:])
        out = np.stack([_median_hw(p, kernel) for p in flat]).reshape(*lead, *arr.shape[-2:])
        return torch.as_tensor(out, dtype=image.dtype, device=image.device)

    arr = np.asarray(image, dtype=np.float64)
    _check_kernel(kernel, arr.shape[:2])
    if arr.ndim == 2:
        return _median_hw(arr, kernel)
    return np.stack([_median_hw(arr[..., c], kernel) for c in range(arr.shape[-1])], axis=-1)


def _check_kernel(kernel: int, hw) -> None:
    if kernel > min(hw):
        raise BadKernelError(f"kernel {kernel} exceeds image size {tuple(hw)}")
