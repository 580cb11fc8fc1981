"""Training loop, distortion-wise evaluation and the ablation grid."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from . import distortion as dist
from .datakit import DatasetManifest, EmbeddedSample
from .errors import ConfigurationError, SampleRejected, TrainingDiverged
from .geometry import decode_vertices, quad_iou_detailed
from .model import DBDH, ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .supervision import LossWeights, bce_mask_loss, focal_heatmap_loss, render_heatmaps, render_mask, total_loss

log = logging.getLogger(__name__)

EVAL_STREAM = 7_000_001


class AblationMode(str, Enum):
    FULL = "full"
    NO_TEXTURE_NO_SEG = "id1"
    NO_TEXTURE = "id2"
    TRAINABLE_FILTERS = "id3"

    @property
    def table_id(self) -> int:
        return {"id1": 1, "id2": 2, "id3": 3, "full": 4}[self.value]

    @property
    def warm_start_only(self) -> bool:
        return self is AblationMode.NO_TEXTURE_NO_SEG


def model_config_for(mode: AblationMode, base: ModelConfig = ModelConfig()) -> ModelConfig:
    d = base.to_dict()
    d["use_texture_branch"] = mode in (AblationMode.FULL, AblationMode.TRAINABLE_FILTERS)
    d["filters_trainable"] = mode is AblationMode.TRAINABLE_FILTERS
    d["use_seg_head"] = True
    return ModelConfig.from_dict(d)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: Optional[int] = None
    lr: float = 1e-3
    weight_decay: float = 1e-5
    aug: str = "ss"
    seed: int = 0
    ablation: AblationMode = AblationMode.FULL
    checkpoint_every: int = 1
    augment: bool = True
    aug_overrides: dict = field(default_factory=dict)
    max_steps: Optional[int] = None
    val_distortion: str = "combined"
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.ablation = AblationMode(self.ablation)
        if self.aug not in dist.DISTORTION_KEYS:
            raise ConfigurationError(f"aug must be one of {sorted(dist.DISTORTION_KEYS)}")
        if self.batch_size is None:
            self.batch_size = 16 if self.aug == "ss" else 32
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("epochs, batch_size and lr must be positive")

    def aug_config(self):
        return dist.config_from_dict(self.aug, self.aug_overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.value
        return d


@dataclass
class TrainResult:
    model: DBDH
    history: list
    best_val_iou: Optional[float]
    best_epoch: int
    checkpoint_path: Optional[str] = None


@dataclass
class EvalEntry:
    distortion: str
    mean_iou: float  # percent
    count: int
    raster_fallbacks: int
    mean_vertex_error: float


@dataclass
class EvalReport:
    family: str
    iou: dict
    count: int
    config_hash: str
    seed: int
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"family": self.family, "iou": self.iou, "count": self.count,
                "config_hash": self.config_hash, "seed": self.seed}


# ---------------------------------------------------------------- examples

def make_example(image, vertices, aug_cfg, rng: np.random.Generator, augment: bool = True):
    """(image, heatmaps, mask, vertices) after the training-time augmentation."""
    image = np.asarray(image, dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    frame = image.shape[:2]
    vertices = np.minimum(vertices, np.array([frame[1] - 1, frame[0] - 1], dtype=np.float64))
    mask = render_mask(vertices, frame)
    if augment:
        if aug_cfg.perspective and aug_cfg.perspective_scale > 0:
            image, vertices, mask = dist.sample_and_warp(image, vertices, mask, aug_cfg.perspective_scale, rng)
        image = dist.distort(image, aug_cfg, rng)
    return image, render_heatmaps(vertices, frame), mask, vertices


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def as_predictor(model: DBDH) -> Callable[[np.ndarray], np.ndarray]:
    def predict(image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = forward(model, _to_tensor(image), train_mode=False)
        return out.heatmaps.numpy()
    return predict


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalCase:
    index: int
    image: np.ndarray
    vertices: np.ndarray


def iter_eval_cases(samples: list, family: str, distortion: str, seed: int,
                    image_of: Optional[Callable] = None, aug_base=None) -> Iterable[EvalCase]:
    """Perspective warp always, plus only the named pixel distortion."""
    cfg = dist.config_for_distortion(family, distortion, aug_base)
    image_of = image_of or (lambda s: s.load())
    for i, s in enumerate(samples):
        rng = dist.stage_rng(seed, EVAL_STREAM, i)
        img, _, _, v = make_example(image_of(s), s.vertices, cfg, rng, augment=True)
        yield EvalCase(i, img, v)


def evaluate(model, samples: list, family: str, distortion: str, seed: int = 0,
             image_of: Optional[Callable] = None, aug_base=None) -> EvalEntry:
    """Mean IoU (%) of decoded vertices against the warped ground truth."""
    predict = as_predictor(model) if isinstance(model, torch.nn.Module) else model
    ious, errs, fallbacks = [], [], 0
    for case in iter_eval_cases(samples, family, distortion, seed, image_of, aug_base):
        pred = decode_vertices(predict(case.image))
        res = quad_iou_detailed(pred, case.vertices)
        fallbacks += res.method == "raster"
        ious.append(res.iou)
        errs.append(np.linalg.norm(pred - case.vertices, axis=1).mean())
    n = len(ious)
    return EvalEntry(distortion, 100.0 * float(np.mean(ious)) if n else float("nan"), n, fallbacks,
                     float(np.mean(errs)) if n else float("nan"))


def evaluate_all(model, samples: list, family: str, seed: int = 0, image_of=None, aug_base=None,
                 config_hash: str = "", distortions: Optional[list] = None) -> EvalReport:
    keys = distortions or list(dist.DISTORTION_KEYS[family])
    entries = [evaluate(model, samples, family, k, seed, image_of, aug_base) for k in keys]
    return EvalReport(family, {e.distortion: e.mean_iou for e in entries}, len(samples), config_hash, seed, entries)


def vertex_error(model, samples: list, image_of=None) -> tuple[float, float]:
    """Mean vertex distance (px) and mean IoU on undistorted samples."""
    predict = as_predictor(model)
    image_of = image_of or (lambda s: s.load())
    errs, ious = [], []
    for s in samples:
        v = np.asarray(s.vertices, dtype=np.float64)
        pred = decode_vertices(predict(image_of(s)))
        errs.append(np.linalg.norm(pred - v, axis=1).mean())
        ious.append(quad_iou_detailed(pred, v).iou)
    return float(np.mean(errs)), float(np.mean(ious))


# ---------------------------------------------------------------- training

def _param_groups(model: DBDH, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim > 1 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def seg_active(mode: AblationMode, epoch: int) -> bool:
    """ID-1 keeps the segmentation loss for the first epoch only."""
    return not mode.warm_start_only or epoch == 0


def training_step(model: DBDH, batch, loss_weights: LossWeights, use_seg: bool):
    images, heatmaps, masks = batch
    out = forward(model, images, train_mode=True) if use_seg else _det_only(model, images)
    det = focal_heatmap_loss(out.heatmaps, heatmaps, loss_weights.alpha, loss_weights.beta)
    seg = bce_mask_loss(out.mask[:, 0], masks) if use_seg and out.mask is not None else None
    return total_loss(det, seg, loss_weights), det, seg


def _det_only(model, images):
    model.train(True)
    return model(images, with_mask=False)


def _collate(examples):
    images = torch.stack([_to_tensor(e[0]) for e in examples])
    heatmaps = torch.from_numpy(np.stack([e[1] for e in examples])).float()
    masks = torch.from_numpy(np.stack([e[2] for e in examples])).float()
    return images, heatmaps, masks


def train(manifest: DatasetManifest, model_config: ModelConfig, train_config: TrainConfig,
          run_dir: Optional[str] = None, progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train from scratch; keeps the weights with the best validation IoU."""
    tc = train_config
    torch.manual_seed(tc.seed)
    model = build_model(model_config_for(tc.ablation, model_config))
    optimizer = torch.optim.AdamW(_param_groups(model, tc.weight_decay), lr=tc.lr)
    aug_cfg = tc.aug_config()
    train_set = manifest.subset("train")
    val_set = manifest.subset("val")
    if not train_set:
        raise ConfigurationError("manifest has no train split")
    cache = {}

    def image_of(s):
        key = s.image_path
        if key not in cache:
            cache[key] = manifest.image_of(s)
        return cache[key]

    def validate():
        if not val_set:
            return None
        entry = evaluate(model, val_set, tc.aug, tc.val_distortion, tc.seed, image_of, aug_cfg)
        return entry.mean_iou / 100.0

    ckpt_dir = os.path.join(run_dir, "checkpoints") if run_dir else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump({"model_config": model.config.to_dict(), "train_config": tc.to_dict(),
                       "aug_config": aug_cfg.to_dict(), "config_hash": model.config.hash(),
                       "filter_bank_grid": model.bank.gabor_grid, "manifest_seed": manifest.seed},
                      fh, indent=2, sort_keys=True)

    history = [{"epoch": 0, "step": 0, "det_loss": float("nan"), "seg_loss": float("nan"),
                "total_loss": float("nan"), "seg_active": False, "val_iou": validate()}]
    best_iou = history[0]["val_iou"]
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    step = 0
    done = False
    for epoch in range(tc.epochs):
        use_seg = seg_active(tc.ablation, epoch)
        order = dist.stage_rng(tc.seed, 1, epoch).permutation(len(train_set))
        sums = {"det": 0.0, "seg": 0.0, "total": 0.0, "n": 0}
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            examples = []
            for i in idx:
                s = train_set[int(i)]
                rng = dist.stage_rng(tc.seed, 2, epoch, int(i))
                examples.append(make_example(image_of(s), s.vertices, aug_cfg, rng, tc.augment))
            loss, det, seg = training_step(model, _collate(examples), tc.loss, use_seg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, {"det": float(det), "seg": None if seg is None else float(seg)})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            sums["det"] += float(det.detach())
            sums["seg"] += float(seg.detach()) if seg is not None else 0.0
            sums["total"] += float(loss.detach())
            sums["n"] += 1
            if tc.max_steps is not None and step >= tc.max_steps:
                done = True
                break
        n = max(sums["n"], 1)
        row = {"epoch": epoch + 1, "step": step, "det_loss": sums["det"] / n,
               "seg_loss": sums["seg"] / n if use_seg else float("nan"),
               "total_loss": sums["total"] / n, "seg_active": use_seg, "val_iou": validate()}
        history.append(row)
        if progress:
            progress(row)
        log.info("epoch %d step %d loss %.4f val_iou %s", row["epoch"], step, row["total_loss"], row["val_iou"])
        # without a val split the latest weights win; ties go to the later epoch
        if row["val_iou"] is None or best_iou is None or row["val_iou"] >= best_iou:
            best_iou, best_state, best_epoch = row["val_iou"], copy.deepcopy(model.state_dict()), epoch + 1
        if ckpt_dir and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            save_checkpoint(os.path.join(ckpt_dir, "last.pt"), model, _ckpt_extra(tc, epoch + 1, row["val_iou"]))
        if done:
            break

    model.load_state_dict(best_state)
    model.eval()
    path = None
    if run_dir:
        path = os.path.join(ckpt_dir, "best.pt")
        save_checkpoint(path, model, _ckpt_extra(tc, best_epoch, best_iou))
        write_metrics_csv(os.path.join(run_dir, "metrics.csv"), history)
    return TrainResult(model, history, best_iou, best_epoch, path)


def _ckpt_extra(tc: TrainConfig, epoch: int, val_iou) -> dict:
    return {"train_config": tc.to_dict(), "epoch": epoch, "val_iou": val_iou, "aug": tc.aug}


METRIC_FIELDS = ["epoch", "step", "det_loss", "seg_loss", "total_loss", "seg_active", "val_iou"]


def write_metrics_csv(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in METRIC_FIELDS})


def run_ablation_grid(manifest: DatasetManifest, model_config: ModelConfig, train_config: TrainConfig,
                      modes: list, eval_split: str = "test", run_dir: Optional[str] = None) -> list[dict]:
    """Train one model per ablation mode with a shared seed; one report row per mode."""
    rows = []
    samples = manifest.subset(eval_split)
    for mode in modes:
        mode = AblationMode(mode)
        tc = copy.deepcopy(train_config)
        tc.ablation = mode
        sub = os.path.join(run_dir, mode.value) if run_dir else None
        result = train(manifest, model_config, tc, sub)
        report = evaluate_all(result.model, samples, tc.aug, tc.seed, manifest.image_of,
                              tc.aug_config(), result.model.config.hash())
        rows.append({"id": mode.table_id, "mode": mode.value,
                     "texture_branch": {"full": "yes", "id3": "trainable"}.get(mode.value, "no"),
                     "segmentation_head": "epoch 1 only" if mode.warm_start_only else "yes",
                     "report": report, "history": result.history})
    return rows


def format_table(rows: list, family: str) -> str:
    keys = dist.DISTORTION_KEYS[family]
    header = ["ID", "mode"] + list(keys)
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join([str(r["id"]), r["mode"]] + [f"{r['report'].iou[k]:.1f}" for k in keys]))
    return "\n".join(lines)


def load_predictor(path) -> tuple[Callable[[np.ndarray], np.ndarray], dict]:
    model, meta = load_checkpoint(path)
    return as_predictor(model), meta
