"""Seeded print-shooting (Aug-SS) and screen-shooting (Aug-PIMoG) simulators.

Geometry lives in :func:`warp_sample`; the pixel pipelines never move
vertices.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import PIL
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DegenerateRegionError, NumericError, SampleRejected
from .geometry import apply_homography, estimate_homography, warp_image

MAX_PERSPECTIVE_SCALE = 0.3
JPEG_CODEC = f"Pillow-{PIL.__version__}/libjpeg"


@dataclass(frozen=True)
class HomographySample:
    matrix: np.ndarray
    corner_offsets: np.ndarray
    scale: float


@dataclass
class AugConfigSS:
    blur_kernels: tuple = (3, 5, 7)
    brightness: tuple = (-0.3, 0.3)
    contrast: tuple = (0.5, 1.5)
    saturation: tuple = (0.0, 1.0)
    hue: tuple = (-0.2, 0.2)
    noise_sigma: tuple = (0.0, 0.2)
    jpeg_quality: tuple = (50, 100)
    perspective_scale: float = 0.3
    perspective: bool = True
    blur: bool = True
    color_jitter: bool = True
    noise: bool = True
    jpeg: bool = True

    family = "ss"
    stage_flags = ("blur", "color_jitter", "noise", "jpeg")

    def __post_init__(self):
        _validate(self)

    def only(self, *stages: str) -> "AugConfigSS":
        return _only(self, stages)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugConfigPIMoG:
    perspective_scale: float = 0.3
    illum_range: tuple = (0.7, 1.3)
    moire_amplitude: tuple = (0.0, 0.1)
    noise_sigma: tuple = (0.0, 0.2)
    perspective: bool = True
    illum: bool = True
    moire: bool = True
    noise: bool = True

    family = "pimog"
    stage_flags = ("illum", "moire", "noise")

    def __post_init__(self):
        _validate(self)
        if self.illum_range[0] <= 0:
            raise ConfigurationError("illumination map values must be positive")

    def only(self, *stages: str) -> "AugConfigPIMoG":
        return _only(self, stages)

    def to_dict(self) -> dict:
        return asdict(self)


def _validate(cfg) -> None:
    if not 0 <= cfg.perspective_scale <= MAX_PERSPECTIVE_SCALE:
        raise ConfigurationError(f"perspective_scale must lie in [0, {MAX_PERSPECTIVE_SCALE}]")
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, (tuple, list)) and len(value) == 2 and f.name != "blur_kernels":
            if value[0] > value[1]:
                raise ConfigurationError(f"{f.name} range {value} is empty")
    if hasattr(cfg, "blur_kernels") and not cfg.blur_kernels:
        raise ConfigurationError("blur_kernels is empty")


def _only(cfg, stages):
    unknown = set(stages) - set(cfg.stage_flags)
    if unknown:
        raise ConfigurationError(f"unknown {cfg.family} stages: {sorted(unknown)}")
    kwargs = {k: (k in stages) for k in cfg.stage_flags}
    d = asdict(cfg)
    d.update(kwargs)
    return type(cfg)(**d)


def config_from_dict(family: str, d: dict | None = None):
    d = dict(d or {})
    cls = {"ss": AugConfigSS, "pimog": AugConfigPIMoG}[family]
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigurationError(f"unknown {family} augmentation keys: {sorted(extra)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


def frame_corners(frame) -> np.ndarray:
    h, w = frame
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def sample_perspective(frame, scale: float, rng: np.random.Generator, max_attempts: int = 8) -> HomographySample:
    """Displace each frame corner by U[-scale/2, scale/2] * min(H, W) and fit the homography."""
    if not 0 <= scale <= MAX_PERSPECTIVE_SCALE:
        raise ConfigurationError(f"perspective scale {scale} outside [0, {MAX_PERSPECTIVE_SCALE}]")
    corners = frame_corners(frame)
    if scale == 0:
        return HomographySample(np.eye(3), np.zeros((4, 2)), 0.0)
    reach = 0.5 * scale * min(frame)
    for _ in range(max_attempts):
        offsets = rng.uniform(-reach, reach, size=(4, 2))
        try:
            hm = estimate_homography(corners, corners + offsets).matrix
        except DegenerateRegionError:
            continue
        if abs(np.linalg.det(hm)) > 1e-9:
            return HomographySample(hm, offsets, float(scale))
    raise NumericError(f"no invertible homography after {max_attempts} attempts")


def warp_sample(image, vertices, mask, hs: HomographySample):
    """Apply ``hs`` to image, vertices and mask together.

    Raises :class:`SampleRejected` if a warped vertex leaves the frame.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    vertices = np.asarray(vertices, dtype=np.float64)
    if np.array_equal(hs.matrix, np.eye(3)):
        return image.copy(), vertices.copy(), np.asarray(mask, dtype=np.float64).copy()
    warped_v = apply_homography(hs.matrix, vertices)
    x, y = warped_v[:, 0], warped_v[:, 1]
    if np.any(x < 0) or np.any(y < 0) or np.any(x > w - 1) or np.any(y > h - 1):
        raise SampleRejected("warped vertex left the frame")
    return warp_image(image, hs.matrix), warped_v, warp_image(mask, hs.matrix)


def sample_and_warp(image, vertices, mask, scale: float, rng: np.random.Generator, max_attempts: int = 32):
    """Draw homographies until one keeps every vertex in frame."""
    frame = np.asarray(image).shape[:2]
    for _ in range(max_attempts):
        hs = sample_perspective(frame, scale, rng)
        try:
            return warp_sample(image, vertices, mask, hs)
        except SampleRejected:
            continue
    raise SampleRejected(f"all {max_attempts} perspective draws pushed a vertex out of frame")


def motion_kernel(size: int, angle: float) -> np.ndarray:
    k = np.zeros((size, size))
    c = (size - 1) / 2
    for t in np.linspace(-c, c, 4 * size):
        k[int(round(c + t * math.sin(angle))), int(round(c + t * math.cos(angle)))] = 1.0
    return k / k.sum()


def disk_kernel(size: int) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[:size, :size] - r
    k = (x ** 2 + y ** 2 <= r ** 2 + 1e-9).astype(np.float64)
    return k / k.sum()


def _filter_channels(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.correlate(image[..., c], kernel, mode="reflect")
                     for c in range(image.shape[2])], axis=-1)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def rotate_hue(image: np.ndarray, fraction: float) -> np.ndarray:
    """Rotate chroma by ``fraction`` of a full turn in YIQ space."""
    a = 2 * math.pi * fraction
    rot = np.array([[1, 0, 0],
                    [0, math.cos(a), -math.sin(a)],
                    [0, math.sin(a), math.cos(a)]])
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    return image @ m.T


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def distort_ss(image, cfg: AugConfigSS, rng: np.random.Generator) -> np.ndarray:
    """Blur -> colour jitter -> Gaussian noise -> JPEG, each stage gated by its flag."""
    out = np.asarray(image, dtype=np.float64)
    if not (cfg.blur or cfg.color_jitter or cfg.noise or cfg.jpeg):
        return out.copy()
    if cfg.blur:
        size = int(rng.choice(cfg.blur_kernels))
        if rng.random() < 0.5:
            kernel = motion_kernel(size, rng.uniform(0, math.pi))
        else:
            kernel = disk_kernel(size)
        out = _filter_channels(out, kernel)
    if cfg.color_jitter:
        out = out + rng.uniform(*cfg.brightness)
        mean = out.mean()
        out = (out - mean) * rng.uniform(*cfg.contrast) + mean
        gray = (out @ _RGB2YIQ[0])[..., None]
        out = gray + rng.uniform(*cfg.saturation) * (out - gray)
        out = rotate_hue(out, rng.uniform(*cfg.hue))
    if cfg.noise:
        sigma = rng.uniform(*cfg.noise_sigma)
        out = out + rng.normal(0.0, 1.0, size=out.shape) * sigma
    out = np.clip(out, 0.0, 1.0)
    if cfg.jpeg:
        quality = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
        out = jpeg_roundtrip(out, quality)
    return out


def illumination_map(frame, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Linear gradient or radial spotlight with values in [lo, hi]."""
    h, w = frame
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    a, b = sorted(rng.uniform(lo, hi, size=2))
    if rng.random() < 0.5:
        phi = rng.uniform(0, 2 * math.pi)
        t = xs * math.cos(phi) + ys * math.sin(phi)
        t = (t - t.min()) / max(np.ptp(t), 1e-12)
        return a + (b - a) * t
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    spread = rng.uniform(0.3, 1.0) * max(h, w)
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return a + (b - a) * np.exp(-r2 / (2 * spread ** 2))


def moire_pattern(frame, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Average of two sinusoidal gratings whose angles differ by less than 10 degrees."""
    h, w = frame
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    theta1 = rng.uniform(0, math.pi)
    theta2 = theta1 + math.radians(rng.uniform(-10, 10))
    pattern = np.zeros(frame)
    for theta in (theta1, theta2):
        freq = rng.uniform(0.05, 0.25)
        phase = rng.uniform(0, 2 * math.pi)
        pattern += np.sin(2 * math.pi * freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase)
    return 0.5 * amplitude * pattern


def distort_pimog(image, cfg: AugConfigPIMoG, rng: np.random.Generator) -> np.ndarray:
    """Illumination map, moire grating, Gaussian noise; clamped to [0, 1]."""
    out = np.asarray(image, dtype=np.float64)
    if not (cfg.illum or cfg.moire or cfg.noise):
        return out.copy()
    frame = out.shape[:2]
    if cfg.illum:
        out = out * illumination_map(frame, *cfg.illum_range, rng)[..., None]
    if cfg.moire:
        out = out + moire_pattern(frame, rng.uniform(*cfg.moire_amplitude), rng)[..., None]
    if cfg.noise:
        sigma = rng.uniform(*cfg.noise_sigma)
        out = out + rng.normal(0.0, 1.0, size=out.shape) * sigma
    return np.clip(out, 0.0, 1.0)


def distort(image, cfg, rng: np.random.Generator) -> np.ndarray:
    if isinstance(cfg, AugConfigSS):
        return distort_ss(image, cfg, rng)
    return distort_pimog(image, cfg, rng)


DISTORTION_KEYS = {
    "ss": ("none", "blur", "color_jitter", "noise", "jpeg", "combined"),
    "pimog": ("none", "illum", "moire", "noise", "combined"),
}


def config_for_distortion(family: str, key: str, base=None):
    """Config with perspective on and only the named pixel stage enabled."""
    if key not in DISTORTION_KEYS[family]:
        raise ConfigurationError(f"distortion {key!r} is not valid for {family}; "
                                 f"choose from {', '.join(DISTORTION_KEYS[family])}")
    base = base if base is not None else config_from_dict(family)
    if key == "combined":
        return base.only(*base.stage_flags)
    if key == "none":
        return base.only()
    return base.only(key)


def stage_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for (seed, worker/epoch, sample, ...) streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))
