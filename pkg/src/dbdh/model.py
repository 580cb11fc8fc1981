"""Dual-branch dual-head localization network and its analytic mult-adds count."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointMismatch, ConfigurationError, ShapeError
from .filterbank import NUM_KERNELS, FilterBank, bank_conv_weight, build_filter_bank, conv_bank, rgby_tensor

STRIDE = 32
MIN_SIDE = 64
# sigmoid(-2.19) ~ 0.1, the usual keypoint-heatmap prior
HEATMAP_BIAS_INIT = -2.19


@dataclass(frozen=True)
class ModelConfig:
    texture_channels: int = 32
    context_stem_channels: int = 32
    context_stage_channels: tuple = (32, 64, 128, 256)
    context_out_channels: int = 64
    head_channels: int = 48
    ase_reduction: int = 16
    filters_trainable: bool = False
    use_texture_branch: bool = True
    use_seg_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "context_stage_channels", tuple(self.context_stage_channels))
        widths = [self.texture_channels, self.context_stem_channels, self.context_out_channels,
                  self.head_channels, *self.context_stage_channels]
        if len(self.context_stage_channels) != 4:
            raise ConfigurationError("context_stage_channels needs exactly 4 widths")
        if any(int(c) <= 0 for c in widths) or self.ase_reduction <= 0:
            raise ConfigurationError("all channel counts and ase_reduction must be positive")
        for c in (self.head_channels, *self.context_stage_channels[2:]):
            if c % self.ase_reduction:
                raise ConfigurationError(f"ase_reduction {self.ase_reduction} does not divide width {c}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_stage_channels"] = list(self.context_stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelOutputs:
    heatmaps: torch.Tensor
    mask: Optional[torch.Tensor] = None


class ConvBNReLU(nn.Sequential):
    def __init__(self, c_in, c_out, k=3, stride=1):
        super().__init__(
            nn.Conv2d(c_in, c_out, k, stride, k // 2, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )


class ASE(nn.Module):
    """Squeeze-excitation gate added back to its input: x + x * s."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        if channels % reduction:
            raise ConfigurationError(f"ASE reduction {reduction} does not divide {channels} channels")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        s = self.gate(x)[:, :, None, None]
        return x + x * s


def ase_apply(feature: torch.Tensor, reduction: int = 16, module: Optional[ASE] = None) -> torch.Tensor:
    """Apply an ASE block to a C x h x w (or N x C x h x w) feature map."""
    squeeze = feature.ndim == 3
    x = feature.unsqueeze(0) if squeeze else feature
    if module is None:
        module = ASE(x.shape[1], reduction).to(x.dtype)
    out = module(x)
    return out[0] if squeeze else out


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class FilterBankConv(nn.Module):
    """Depthwise SRM & Gabor layer over R, G, B, Y; frozen unless ``trainable``."""

    def __init__(self, bank: FilterBank, trainable: bool = False):
        super().__init__()
        weight = bank_conv_weight(bank, 4)
        if trainable:
            # ablation: same shape, random init, learned
            w = torch.empty_like(weight)
            nn.init.kaiming_uniform_(w, a=5 ** 0.5)
            self.weight = nn.Parameter(w)
        else:
            self.register_buffer("weight", weight)

    def forward(self, x):
        return conv_bank(rgby_tensor(x), self.weight)


class TextureBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, bank: FilterBank):
        super().__init__()
        c = cfg.texture_channels
        self.filters = FilterBankConv(bank, cfg.filters_trainable)
        self.compress = ConvBNReLU(4 * NUM_KERNELS, c, 1)
        self.reduce = ConvBNReLU(c, c, 3, 2)

    def forward(self, x):
        return self.reduce(self.compress(self.filters(x)))


class PlainTextureBranch(nn.Sequential):
    """Three stacked conv blocks standing in for the texture branch in ablations."""

    def __init__(self, cfg: ModelConfig):
        c = cfg.texture_channels
        super().__init__(ConvBNReLU(3, c, 3, 1), ConvBNReLU(c, c, 3, 2), ConvBNReLU(c, c, 3, 1))


class ContextBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stem = cfg.context_stem_channels
        widths = cfg.context_stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem, 7, 2, 3, bias=False),
            nn.BatchNorm2d(stem),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        layers = []
        c_in = stem
        for i, c in enumerate(widths):
            stride = 1 if i == 0 else 2
            layers.append(nn.Sequential(BasicBlock(c_in, c, stride), BasicBlock(c, c, 1)))
            c_in = c
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        self.ase3 = ASE(widths[2], cfg.ase_reduction)
        self.ase4 = ASE(widths[3], cfg.ase_reduction)
        self.global_conv = nn.Conv2d(widths[3], widths[3], 1)
        self.out = ConvBNReLU(widths[3], cfg.context_out_channels, 1)

    def forward(self, x, size):
        x = self.stem(x)
        x = self.layer2(self.layer1(x))
        x = self.ase3(self.layer3(x))
        x = self.ase4(self.layer4(x))
        g = self.global_conv(x.mean(dim=(2, 3), keepdim=True))
        x = self.out(x + g)
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class Head(nn.Module):
    def __init__(self, c_in, cfg: ModelConfig, out_channels, bias_init=0.0):
        super().__init__()
        self.fuse = ConvBNReLU(c_in, cfg.head_channels, 3)
        self.ase = ASE(cfg.head_channels, cfg.ase_reduction)
        self.predict = nn.Conv2d(cfg.head_channels, out_channels, 3, 1, 1)
        nn.init.constant_(self.predict.bias, bias_init)

    def forward(self, feats, size):
        x = self.predict(self.ase(self.fuse(feats)))
        return torch.sigmoid(F.interpolate(x, size=size, mode="bilinear", align_corners=False))


class DBDH(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), bank: Optional[FilterBank] = None):
        super().__init__()
        self.config = config
        self.bank = bank if bank is not None else build_filter_bank()
        if config.use_texture_branch:
            self.texture = TextureBranch(config, self.bank)
        else:
            self.texture = PlainTextureBranch(config)
        self.context = ContextBranch(config)
        fused = config.texture_channels + config.context_out_channels
        self.det_head = Head(fused, config, 4, HEATMAP_BIAS_INIT)
        self.seg_head = Head(fused, config, 1) if config.use_seg_head else None

    def filter_weight(self) -> Optional[torch.Tensor]:
        if isinstance(self.texture, TextureBranch):
            return self.texture.filters.weight
        return None

    def features(self, x):
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"input {h}x{w}: height and width must be divisible by {STRIDE}")
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ShapeError(f"input {h}x{w}: height and width must be at least {MIN_SIDE}")
        t = self.texture(x)
        c = self.context(x, t.shape[-2:])
        return torch.cat([t, c], dim=1)

    def forward(self, x, with_mask: Optional[bool] = None) -> ModelOutputs:
        size = x.shape[-2:]
        feats = self.features(x)
        heat = self.det_head(feats, size)
        if with_mask is None:
            with_mask = self.training
        mask = self.seg_head(feats, size) if (with_mask and self.seg_head is not None) else None
        return ModelOutputs(heat, mask)


def build_model(config: ModelConfig = ModelConfig(), bank: Optional[FilterBank] = None) -> DBDH:
    return DBDH(config, bank)


def _pad_amount(n: int) -> tuple[int, int]:
    total = (-n) % STRIDE
    return total // 2, total - total // 2


def padded_size(n: int) -> int:
    return n + sum(_pad_amount(n))


def forward(model: DBDH, image: torch.Tensor, train_mode: bool = False) -> ModelOutputs:
    """Run the network on a 3 x H x W (or N x 3 x H x W) image in [0, 1].

    Sizes that are not multiples of 32 are reflect-padded and the outputs are
    centre-cropped back to H x W.
    """
    single = image.ndim == 3
    x = image.unsqueeze(0) if single else image
    if x.shape[1] != 3:
        raise ShapeError(f"expected 3 input channels, got {x.shape[1]}")
    h, w = x.shape[-2:]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ShapeError(f"input {h}x{w}: height and width must be at least {MIN_SIDE}")
    (top, bottom), (left, right) = _pad_amount(h), _pad_amount(w)
    if top or bottom or left or right:
        x = F.pad(x, (left, right, top, bottom), mode="reflect")
    model.train(train_mode)
    with torch.set_grad_enabled(train_mode and torch.is_grad_enabled()):
        out = model(x, with_mask=train_mode)
    heat = out.heatmaps[..., top:top + h, left:left + w]
    mask = None if out.mask is None else out.mask[..., top:top + h, left:left + w]
    if single:
        heat = heat[0]
        mask = None if mask is None else mask[0]
    return ModelOutputs(heat, mask)


# ---------------------------------------------------------------- profiling

def conv_mult_adds(h_out: int, w_out: int, c_in: int, c_out: int, k: int) -> int:
    return h_out * w_out * c_out * c_in * k * k


def _down(n: int, stride: int) -> int:
    return (n + stride - 1) // stride


def mult_adds_breakdown(config: ModelConfig, input_hw, include_seg_head: bool = False) -> list[tuple[str, int, bool]]:
    """Per-layer (name, mult-adds, scales_with_input) for the inference graph.

    Non-multiples of 32 are counted at the padded size the network actually runs.
    """
    h, w = (padded_size(int(n)) for n in input_hw)
    rows: list[tuple[str, int, bool]] = []

    def conv(name, ho, wo, ci, co, k):
        rows.append((name, conv_mult_adds(ho, wo, ci, co, k), True))

    def fc(name, ci, co):
        rows.append((name, ci * co, False))

    h2, w2 = _down(h, 2), _down(w, 2)
    tc = config.texture_channels
    if config.use_texture_branch:
        conv("texture.filters", h, w, 1, 4 * NUM_KERNELS, 5)
        conv("texture.compress", h, w, 4 * NUM_KERNELS, tc, 1)
        conv("texture.reduce", h2, w2, tc, tc, 3)
    else:
        conv("texture.block1", h, w, 3, tc, 3)
        conv("texture.block2", h2, w2, tc, tc, 3)
        conv("texture.block3", h2, w2, tc, tc, 3)

    stem = config.context_stem_channels
    conv("context.stem", h2, w2, 3, stem, 7)
    ch, cw = _down(h2, 2), _down(w2, 2)
    c_in = stem
    for i, c in enumerate(config.context_stage_channels):
        stride = 1 if i == 0 else 2
        ch, cw = _down(ch, stride), _down(cw, stride)
        conv(f"context.layer{i + 1}.0.conv1", ch, cw, c_in, c, 3)
        conv(f"context.layer{i + 1}.0.conv2", ch, cw, c, c, 3)
        if stride != 1 or c_in != c:
            conv(f"context.layer{i + 1}.0.downsample", ch, cw, c_in, c, 1)
        conv(f"context.layer{i + 1}.1.conv1", ch, cw, c, c, 3)
        conv(f"context.layer{i + 1}.1.conv2", ch, cw, c, c, 3)
        if i >= 2:
            r = c // config.ase_reduction
            fc(f"context.ase{i + 1}.fc1", c, r)
            fc(f"context.ase{i + 1}.fc2", r, c)
        c_in = c
    fc("context.global_conv", c_in, c_in)
    conv("context.out", ch, cw, c_in, config.context_out_channels, 1)

    fused = tc + config.context_out_channels
    hc = config.head_channels
    heads = [("det_head", 4)]
    if include_seg_head and config.use_seg_head:
        heads.append(("seg_head", 1))
    for name, out_c in heads:
        conv(f"{name}.fuse", h2, w2, fused, hc, 3)
        fc(f"{name}.ase.fc1", hc, hc // config.ase_reduction)
        fc(f"{name}.ase.fc2", hc // config.ase_reduction, hc)
        conv(f"{name}.predict", h2, w2, hc, out_c, 3)
    return rows


def count_mult_adds(config: ModelConfig, input_hw, include_seg_head: bool = False) -> int:
    """Closed-form multiply-add count over conv and FC layers (inference graph by default)."""
    return int(sum(n for _, n, _ in mult_adds_breakdown(config, input_hw, include_seg_head)))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: DBDH, extra: Optional[dict] = None) -> None:
    meta = {
        "model_config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "filter_bank": model.bank.to_json(),
    }
    if extra:
        meta.update(extra)
    torch.save({"meta": json.dumps(meta, sort_keys=True), "state_dict": model.state_dict()}, path)


def read_checkpoint_meta(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return json.loads(blob["meta"])


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> tuple[DBDH, dict]:
    """Rebuild the model stored at ``path``; refuses a config that differs from ``expected``."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    meta = json.loads(blob["meta"])
    config = ModelConfig.from_dict(meta["model_config"])
    if config.hash() != meta["config_hash"]:
        raise CheckpointMismatch("checkpoint config hash does not match its embedded config")
    if expected is not None and expected.hash() != meta["config_hash"]:
        raise CheckpointMismatch(
            f"checkpoint architecture {meta['config_hash']} differs from requested {expected.hash()}")
    model = DBDH(config, FilterBank.from_json(meta["filter_bank"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, meta
