"""Fixed high-pass filter bank: 30 SRM residual kernels and 32 Gabor kernels.

Kernels are applied depthwise to the R, G, B and Y planes of an image, giving
62 * 4 = 248 response maps.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

SRM = "SRM"
GABOR = "GABOR"

PAD_SIZE = 5
NUM_SRM = 30
NUM_GABOR = 32
NUM_KERNELS = NUM_SRM + NUM_GABOR

LUMA = (0.299, 0.587, 0.114)

# the 8 neighbour directions as (dy, dx), clockwise from east
_DIRECTIONS8 = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]
# line orientations for symmetric second-order residuals
_DIRECTIONS4 = [(0, 1), (1, 0), (1, 1), (1, -1)]

_SQUARE3 = np.array([[-1, 2, -1],
                     [2, -4, 2],
                     [-1, 2, -1]], dtype=np.float64)
_SQUARE5 = np.array([[-1, 2, -2, 2, -1],
                     [2, -6, 8, -6, 2],
                     [-2, 8, -12, 8, -2],
                     [2, -6, 8, -6, 2],
                     [-1, 2, -2, 2, -1]], dtype=np.float64)


@dataclass(frozen=True)
class KernelSpec:
    family: str
    index: int
    size: int
    weights: np.ndarray
    normalizer: float
    params: Optional[dict] = None

    def padded(self, pad_size: int = PAD_SIZE) -> np.ndarray:
        """Weights zero-padded (centred) to ``pad_size`` x ``pad_size``."""
        off = (pad_size - self.size) // 2
        out = np.zeros((pad_size, pad_size), dtype=np.float64)
        out[off:off + self.size, off:off + self.size] = self.weights
        return out

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "index": self.index,
            "size": self.size,
            "normalizer": self.normalizer,
            "params": self.params,
            "weights": [float(v) for v in self.weights.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        size = int(d["size"])
        w = np.asarray(d["weights"], dtype=np.float64).reshape(size, size)
        return cls(d["family"], int(d["index"]), size, w, float(d["normalizer"]), d.get("params"))


@dataclass(frozen=True)
class FilterBank:
    kernels: tuple
    pad_size: int = PAD_SIZE
    gabor_grid: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.kernels)

    def weights(self) -> np.ndarray:
        """(62, 5, 5) float64 stack in bank order."""
        return np.stack([k.padded(self.pad_size) for k in self.kernels])

    def to_json(self) -> str:
        doc = {
            "pad_size": self.pad_size,
            "gabor_grid": self.gabor_grid,
            "kernels": [k.to_dict() for k in self.kernels],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FilterBank":
        doc = json.loads(text)
        kernels = tuple(KernelSpec.from_dict(k) for k in doc["kernels"])
        return cls(kernels, int(doc["pad_size"]), doc.get("gabor_grid", {}))


def _directional(size: int, taps: Sequence[tuple[int, float]], direction: tuple[int, int]) -> np.ndarray:
    """Place ``taps`` (offset along direction, value) on a size x size grid."""
    k = np.zeros((size, size), dtype=np.float64)
    c = size // 2
    dy, dx = direction
    for step, value in taps:
        k[c + step * dy, c + step * dx] = value
    return k


def build_srm_bank() -> list[KernelSpec]:
    """The 30 basic SRM residual kernels, each pre-divided by its normalizer.

    Order: 8 first-order, 4 second-order, 8 third-order, SQUARE 3x3,
    4 EDGE 3x3, SQUARE 5x5, 4 EDGE 5x5.
    """
    raw: list[tuple[np.ndarray, float, str]] = []
    for d in _DIRECTIONS8:
        raw.append((_directional(3, [(0, -1), (1, 1)], d), 1.0, "first_order"))
    for d in _DIRECTIONS4:
        raw.append((_directional(3, [(-1, 1), (0, -2), (1, 1)], d), 2.0, "second_order"))
    for d in _DIRECTIONS8:
        raw.append((_directional(5, [(-1, 1), (0, -3), (1, 3), (2, -1)], d), 3.0, "third_order"))
    raw.append((_SQUARE3.copy(), 4.0, "square3"))
    edge3 = _SQUARE3.copy()
    edge3[2, :] = 0
    for r in range(4):
        raw.append((np.rot90(edge3, -r).copy(), 4.0, "edge3"))
    raw.append((_SQUARE5.copy(), 12.0, "square5"))
    edge5 = _SQUARE5.copy()
    edge5[3:, :] = 0
    for r in range(4):
        raw.append((np.rot90(edge5, -r).copy(), 12.0, "edge5"))

    return [
        KernelSpec(SRM, i, w.shape[0], w / norm, norm, {"class": cls})
        for i, (w, norm, cls) in enumerate(raw)
    ]


def gabor_kernel(sigma: float, theta: float, phase: float, size: int = PAD_SIZE,
                 aspect: float = 0.5, wavelength: Optional[float] = None) -> np.ndarray:
    """Raw (un-normalized) Gabor closed form sampled on a size x size grid."""
    if wavelength is None:
        wavelength = 4.0 * sigma
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    envelope = np.exp(-(xr ** 2 + (aspect * yr) ** 2) / (2.0 * sigma ** 2))
    return envelope * np.cos(2.0 * math.pi * xr / wavelength + phase)


def build_gabor_bank(orientations: int = 8,
                     phases: Sequence[float] = (0.0, math.pi / 2),
                     sigmas: Sequence[float] = (0.75, 1.5),
                     aspect: float = 0.5) -> list[KernelSpec]:
    """Zero-mean, L1-normalized 5x5 Gabor kernels (sigma, orientation, phase order)."""
    n = orientations * len(phases) * len(sigmas)
    if n != NUM_GABOR:
        raise ConfigurationError(
            f"Gabor grid {orientations}x{len(phases)}x{len(sigmas)} gives {n} kernels, need {NUM_GABOR}")
    out = []
    for sigma in sigmas:
        for o in range(orientations):
            theta = math.pi * o / orientations
            for phase in phases:
                k = gabor_kernel(sigma, theta, phase, PAD_SIZE, aspect)
                k = k - k.mean()
                norm = float(np.abs(k).sum())
                out.append(KernelSpec(
                    GABOR, len(out), PAD_SIZE, k / norm, norm,
                    {"sigma": float(sigma), "orientation_rad": theta,
                     "phase_rad": float(phase), "aspect": float(aspect)},
                ))
    return out


def build_filter_bank(**gabor_kwargs) -> FilterBank:
    grid = {"orientations": 8, "phases": [0.0, math.pi / 2], "sigmas": [0.75, 1.5], "aspect": 0.5}
    grid.update({k: list(v) if isinstance(v, (tuple, list)) else v for k, v in gabor_kwargs.items()})
    kernels = build_srm_bank() + build_gabor_bank(**gabor_kwargs)
    return FilterBank(tuple(kernels), PAD_SIZE, grid)


def rgb_to_rgby(image):
    """Append BT.601 luma as a fourth channel. Accepts H x W x 3 arrays."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 image, got shape {image.shape}")
    y = image @ np.asarray(LUMA)
    return np.concatenate([image, y[..., None]], axis=-1)


def rgby_tensor(x: torch.Tensor) -> torch.Tensor:
    """Batched N x 3 x H x W -> N x 4 x H x W (same luma)."""
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    y = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    return torch.cat([x, y], dim=1)


def bank_conv_weight(bank: FilterBank, in_channels: int = 4, dtype=torch.float32) -> torch.Tensor:
    """Depthwise weight of shape (in_channels * 62, 1, 5, 5), channel-major."""
    w = torch.from_numpy(bank.weights()).to(dtype)
    return w.repeat(in_channels, 1, 1).unsqueeze(1)


def conv_bank(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Cross-correlate each input plane with every kernel; reflect-padded, stride 1."""
    in_channels = x.shape[1]
    pad = weight.shape[-1] // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(x, weight, groups=in_channels)


def apply_bank(bank: FilterBank, image) -> np.ndarray:
    """H x W x 4 image -> H x W x 248 responses ([ch0 x k0..k61, ch1 x ...])."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 4:
        raise ShapeError(f"expected H x W x 4 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < bank.pad_size or w < bank.pad_size:
        raise ShapeError(f"image {h}x{w} is smaller than the {bank.pad_size}x{bank.pad_size} kernel support")
    x = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
    weight = bank_conv_weight(bank, 4, dtype=torch.float64)
    with torch.no_grad():
        out = conv_bank(x, weight)
    return out[0].permute(1, 2, 0).numpy()
