"""Training targets (Gaussian vertex heatmaps, region masks) and losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from matplotlib.path import Path

from .errors import DegenerateRegionError, OutOfFrameError
from .geometry import is_simple, nearest_pixel, signed_area

EPS = 1e-6
HEATMAP_SIGMA = 5.0


@dataclass(frozen=True)
class LossWeights:
    lambda_det: float = 1.0
    lambda_seg: float = 10.0
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        for name in ("lambda_det", "lambda_seg", "alpha", "beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _check_in_frame(vertices: np.ndarray, frame) -> None:
    h, w = frame
    x, y = vertices[:, 0], vertices[:, 1]
    if np.any(x < 0) or np.any(y < 0) or np.any(x >= w) or np.any(y >= h):
        raise OutOfFrameError(f"vertices {vertices.tolist()} fall outside the {h}x{w} frame")


def render_heatmaps(vertices, frame, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """4 x H x W Gaussian heatmaps, one channel per corner (TL, TR, BR, BL).

    Each Gaussian is centred on the nearest integer pixel of its vertex so the
    peak pixel holds exactly 1.0.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(4, 2)
    _check_in_frame(v, frame)
    h, w = frame
    peaks = nearest_pixel(v)
    peaks[:, 0] = np.minimum(peaks[:, 0], w - 1)
    peaks[:, 1] = np.minimum(peaks[:, 1], h - 1)
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    out = np.empty((4, h, w), dtype=np.float64)
    for c, (px, py) in enumerate(peaks):
        gy = np.exp(-((ys - py) ** 2) / (2 * sigma ** 2))
        gx = np.exp(-((xs - px) ** 2) / (2 * sigma ** 2))
        out[c] = np.outer(gy, gx)
        out[c, py, px] = 1.0
    return out


def render_mask(vertices, frame) -> np.ndarray:
    """Binary H x W mask of pixels whose centre lies inside the quadrilateral."""
    v = np.asarray(vertices, dtype=np.float64).reshape(4, 2)
    if abs(signed_area(v)) < 1e-9 or not is_simple(v):
        raise DegenerateRegionError(f"quadrilateral {v.tolist()} is degenerate or self-intersecting")
    h, w = frame
    x0, y0 = np.floor(v.min(axis=0)).astype(int)
    x1, y1 = np.ceil(v.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    mask = np.zeros((h, w), dtype=np.float64)
    if x1 < x0 or y1 < y0:
        return mask
    gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    inside = Path(v).contains_points(np.stack([gx.ravel(), gy.ravel()], axis=1))
    mask[y0:y1 + 1, x0:x1 + 1] = inside.reshape(gy.shape)
    return mask


def focal_heatmap_loss(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced pixelwise focal loss, summed over channels and pixels.

    Leading batch dimensions are averaged, so a single 4 x H x W map gives the
    plain sum.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p = pred.clamp(EPS, 1 - EPS)
    pos = gt == 1
    pos_term = (1 - p) ** alpha * torch.log(p)
    neg_term = (1 - gt) ** beta * p ** alpha * torch.log(1 - p)
    terms = torch.where(pos, pos_term, neg_term)
    per_map = -terms.flatten(-3).sum(-1)
    return per_map.mean() if per_map.ndim else per_map


def bce_mask_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy averaged over pixels (and over any batch dims)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p = pred.clamp(EPS, 1 - EPS)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()


def total_loss(det, seg, weights: LossWeights = LossWeights()):
    """Weighted sum; pass ``seg=None`` (or 0) when the segmentation head is off."""
    if seg is None:
        seg = 0.0
    return weights.lambda_det * det + weights.lambda_seg * seg
