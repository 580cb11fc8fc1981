"""Host tiling, surrogate embedding, WM-SS post-processing, PSNR and manifests."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np
from PIL import Image

from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)

RESIZE_HW = (900, 1800)
TILE = 900
TILE_STRIDE = 450
PAPER_SPLIT = (10000, 300, 350)
PSNR_CAP = 100.0

SCHEMES = ("WMSS", "WMPIMOG", "SYNTH")
SPLITS = ("train", "val", "test")


@dataclass
class HostImage:
    path: Optional[str]
    pixels: np.ndarray
    source_id: str
    tile_index: int


@dataclass
class EmbeddedSample:
    image_path: str
    host_path: Optional[str]
    vertices: list
    region_rect: tuple
    scheme: str = "SYNTH"
    psnr_db: float = 0.0
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "image_path": self.image_path,
            "host_path": self.host_path,
            "vertices": [[float(x), float(y)] for x, y in self.vertices],
            "region_rect": [int(v) for v in self.region_rect],
            "scheme": self.scheme,
            "psnr_db": float(self.psnr_db),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddedSample":
        return cls(d["image_path"], d.get("host_path"), [list(p) for p in d["vertices"]],
                   tuple(d["region_rect"]), d.get("scheme", "SYNTH"), float(d.get("psnr_db", 0.0)))

    def load(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        return load_image(self.image_path)


@dataclass
class DatasetManifest:
    samples: list
    split: dict
    seed: int
    base_dir: Optional[str] = field(default=None, compare=False)

    def subset(self, name: str) -> list:
        return [s for s in self.samples if self.split.get(s.image_path) == name]

    def dumps(self) -> str:
        lines = [json.dumps({"manifest": 1, "seed": self.seed}, sort_keys=True)]
        for s in self.samples:
            d = s.to_dict()
            d["split"] = self.split[s.image_path]
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base_dir: Optional[str] = None) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])
        samples, split = [], {}
        for ln in lines[1:]:
            d = json.loads(ln)
            s = EmbeddedSample.from_dict(d)
            samples.append(s)
            split[s.image_path] = d["split"]
        return cls(samples, split, int(header["seed"]), base_dir)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            return cls.loads(fh.read(), os.path.dirname(os.path.abspath(path)))

    def image_of(self, sample: EmbeddedSample) -> np.ndarray:
        if sample.image is not None:
            return sample.image
        path = sample.image_path
        if self.base_dir and not os.path.isabs(path):
            path = os.path.join(self.base_dir, path)
        return load_image(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_png(path, image: np.ndarray) -> None:
    u8 = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def psnr(a, b) -> float:
    """PSNR in dB for [0, 1] images; identical inputs return the 100 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _to_pil(item) -> tuple[Image.Image, str, Optional[str]]:
    if isinstance(item, (str, os.PathLike)):
        im = Image.open(item)
        im.load()
        return im.convert("RGB"), os.path.splitext(os.path.basename(item))[0], str(item)
    arr = np.asarray(item)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    return Image.fromarray(arr), "", None


def iter_tiles(images: Iterable, errors: Optional[list] = None) -> Iterator[HostImage]:
    """Resize each input to 1800x900 (bilinear) and yield three 900x900 tiles.

    Undecodable inputs are logged, recorded in ``errors`` and skipped.
    """
    for n, item in enumerate(images):
        try:
            im, source_id, path = _to_pil(item)
        except Exception as exc:  # noqa: BLE001 - any decoder failure skips the file
            log.warning("skipping undecodable input %r: %s", item, exc)
            if errors is not None:
                errors.append((item, str(exc)))
            continue
        source_id = source_id or f"img{n:05d}"
        resized = np.asarray(im.resize((RESIZE_HW[1], RESIZE_HW[0]), Image.BILINEAR))
        for t, x0 in enumerate(range(0, RESIZE_HW[1] - TILE + 1, TILE_STRIDE)):
            tile = resized[:, x0:x0 + TILE].astype(np.float64) / 255.0
            yield HostImage(path, tile, source_id, t)


def tile_hosts(images: Iterable, errors: Optional[list] = None) -> list[HostImage]:
    return list(iter_tiles(images, errors))


def center_crop(image: np.ndarray, side: int) -> np.ndarray:
    h, w = image.shape[:2]
    if side > min(h, w):
        raise ShapeError(f"crop {side} exceeds image {h}x{w}")
    y0, x0 = (h - side) // 2, (w - side) // 2
    return image[y0:y0 + side, x0:x0 + side].copy()


def centered_region(frame, side: int) -> tuple:
    h, w = frame
    x0, y0 = (w - side) // 2, (h - side) // 2
    return x0, y0, x0 + side, y0 + side


def rect_vertices(rect) -> list:
    x0, y0, x1, y1 = rect
    return [[float(x0), float(y0)], [float(x1), float(y0)], [float(x1), float(y1)], [float(x0), float(y1)]]


def highpass_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """White noise with radial frequencies below 0.25 cycles/px removed, unit RMS."""
    h, w, c = shape
    noise = rng.standard_normal(shape)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    keep = np.sqrt(fx ** 2 + fy ** 2) >= 0.25
    spec = np.fft.fft2(noise, axes=(0, 1)) * keep[..., None]
    out = np.real(np.fft.ifft2(spec, axes=(0, 1)))
    out -= out.mean(axis=(0, 1), keepdims=True)
    return out / out.std()


def _embed_at(host: np.ndarray, rect, residual: np.ndarray, scale: float) -> np.ndarray:
    x0, y0, x1, y1 = rect
    out = host.copy()
    patch = host[y0:y1, x0:x1] + scale * residual
    out[y0:y1, x0:x1] = np.clip(np.rint(patch * 255.0), 0, 255) / 255.0
    return out


def synthetic_embed(host: HostImage, region_side: int, target_psnr_db: float,
                    rng: np.random.Generator, tol_db: float = 0.2, max_steps: int = 20) -> EmbeddedSample:
    """Add a high-frequency residual to the centred square so full-frame PSNR hits the target.

    The modified patch is 8-bit quantized so an 8-bit host survives PNG storage unchanged.
    """
    pixels = host.pixels
    h, w = pixels.shape[:2]
    if region_side > min(h, w):
        raise ShapeError(f"region {region_side} does not fit in {h}x{w}")
    if not 30 <= target_psnr_db <= 50:
        raise ValueError("target_psnr_db must lie in [30, 50]")
    rect = centered_region((h, w), region_side)
    residual = highpass_noise((region_side, region_side, pixels.shape[2]), rng)

    # initial guess ignores clipping and quantization
    frac = region_side ** 2 / (h * w)
    target_mse = 10 ** (-target_psnr_db / 10)
    lo, hi = 0.0, 4.0 * np.sqrt(target_mse / frac)
    best = None
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        img = _embed_at(pixels, rect, residual, mid)
        p = psnr(img, pixels)
        if abs(p - target_psnr_db) <= tol_db:
            best = (img, p)
            break
        if p > target_psnr_db:
            lo = mid
        else:
            hi = mid
    if best is None:
        raise NumericError(f"could not reach {target_psnr_db} dB within {max_steps} bisection steps")
    img, p = best
    return EmbeddedSample(
        image_path="", host_path=host.path, vertices=rect_vertices(rect), region_rect=rect,
        scheme="SYNTH", psnr_db=p, image=img,
    )


def wmss_postprocess(host, embedded, region_rect, strength: float = 0.6, border_px: int = 10) -> np.ndarray:
    """Scale the embedding residual by ``strength`` and restore a ``border_px`` ring of host pixels."""
    host = np.asarray(host, dtype=np.float64)
    embedded = np.asarray(embedded, dtype=np.float64)
    h, w = host.shape[:2]
    x0, y0, x1, y1 = region_rect
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ShapeError(f"region {region_rect} lies outside the {h}x{w} image")
    out = host.copy()
    if strength == 1:
        out[y0:y1, x0:x1] = embedded[y0:y1, x0:x1]
    else:
        out[y0:y1, x0:x1] = host[y0:y1, x0:x1] + strength * (embedded[y0:y1, x0:x1] - host[y0:y1, x0:x1])
    if border_px > 0:
        inner = out[y0 + border_px:y1 - border_px, x0 + border_px:x1 - border_px].copy()
        out[y0:y1, x0:x1] = host[y0:y1, x0:x1]
        out[y0 + border_px:y1 - border_px, x0 + border_px:x1 - border_px] = inner
    return out


def split_manifest(samples: list, seed: int, sizes=PAPER_SPLIT) -> DatasetManifest:
    """Seeded shuffle, then consecutive train/val/test blocks of the given sizes."""
    need = sum(sizes)
    if len(samples) < need:
        raise ValueError(f"need {need} samples for split {tuple(sizes)}, have {len(samples)} "
                         f"(deficit {need - len(samples)})")
    order = np.random.default_rng(seed).permutation(len(samples))
    chosen, split = [], {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        for i in order[start:start + size]:
            s = samples[int(i)]
            chosen.append(s)
            split[s.image_path] = name
        start += size
    if len(samples) > need:
        log.info("split leaves %d samples unassigned", len(samples) - need)
    return DatasetManifest(chosen, split, int(seed))


def synthetic_host(frame, rng: np.random.Generator) -> np.ndarray:
    """Smooth random colour field standing in for a natural photo (8-bit levels)."""
    from scipy import ndimage

    h, w = frame
    coarse = rng.uniform(0.15, 0.85, size=(max(h // 32, 2), max(w // 32, 2), 3))
    field_ = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=3)[:h, :w]
    field_ = field_ + rng.normal(0, 0.01, size=field_.shape)
    return np.clip(np.rint(field_ * 255.0), 0, 255) / 255.0


def make_synthetic_samples(n: int, size: int = 256, region_side: int = 128, target_psnr_db: float = 40.0,
                           seed: int = 0, out_dir: Optional[str] = None) -> list[EmbeddedSample]:
    """``n`` surrogate-embedded samples on synthetic hosts; PNGs written when ``out_dir`` is given."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        host = HostImage(None, synthetic_host((size, size), rng), f"synth{i:05d}", 0)
        s = synthetic_embed(host, region_side, target_psnr_db, rng)
        s.image_path = f"sample_{i:05d}.png"
        if out_dir:
            save_png(os.path.join(out_dir, s.image_path), s.image)
        samples.append(s)
    return samples
