"""Command-line entry point: prepare -> embed -> train -> eval -> localize.

Every subcommand prints one JSON document on stdout (``eval --pretty`` adds a
tab-separated table) and writes ``run_metadata.json`` next to its outputs.
Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import datakit
from .errors import DBDHError, DegenerateRegionError, ShapeError

log = logging.getLogger("dbdh")

REFERENCE_MULT_ADDS = 30.71e9
BAND = 0.25
DATA_ENV = "DBDH_DATA_DIR"
RUNS_ENV = "DBDH_RUNS_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _resolve(path: Optional[str], env: str) -> Optional[str]:
    """Relative paths are taken under ``$env`` when that variable is set."""
    if path is None:
        return None
    base = os.environ.get(env)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _source_hash() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def write_run_metadata(out_dir, argv, config: dict, seed) -> str:
    import PIL
    import torch

    from .distortion import JPEG_CODEC

    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "command": ["dbdh", *argv],
        "config": {k: v for k, v in config.items() if not callable(v)},
        "seed": seed,
        "codecs": {"jpeg": JPEG_CODEC, "png": f"Pillow-{PIL.__version__}"},
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__},
        "source_hash": _source_hash(),
        "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = os.path.join(out_dir, "run_metadata.json")
    with open(path, "w") as fh:
        json.dump(_jsonable(meta), fh, indent=2, sort_keys=True)
    return path


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def _model_config(args):
    from .model import ModelConfig

    if getattr(args, "model_config", None):
        with open(args.model_config) as fh:
            return ModelConfig.from_dict(json.load(fh))
    return ModelConfig()


# ---------------------------------------------------------------- subcommands

def cmd_profile(args, argv):
    from .model import ModelConfig, count_mult_adds

    if args.height <= 0 or args.width <= 0:
        raise ValueError("height and width must be positive")
    n = count_mult_adds(ModelConfig(), (args.height, args.width), include_seg_head=args.include_seg_head)
    lo, hi = (1 - BAND) * REFERENCE_MULT_ADDS, (1 + BAND) * REFERENCE_MULT_ADDS
    _emit({"mult_adds": n, "reference": REFERENCE_MULT_ADDS, "band": [lo, hi], "within_band": lo <= n <= hi,
           "input_hw": [args.height, args.width]})
    return 0


def cmd_prepare_hosts(args, argv):
    src = _resolve(args.input, DATA_ENV)
    out = _resolve(args.out, DATA_ENV)
    files = sorted(f for f in glob.glob(os.path.join(src, "*")) if os.path.isfile(f))
    if args.limit:
        files = files[:args.limit]
    if not files:
        raise ValueError(f"no input files under {src}")
    os.makedirs(out, exist_ok=True)
    errors: list = []
    count = 0
    for tile in datakit.iter_tiles(files, errors):
        datakit.save_png(os.path.join(out, f"{tile.source_id}_t{tile.tile_index}.png"), tile.pixels)
        count += 1
    write_run_metadata(out, argv, vars(args), args.seed)
    _emit({"inputs": len(files), "tiles": count, "skipped": [str(e[0]) for e in errors], "out": out})
    return 0


def cmd_embed_synthetic(args, argv):
    out = _resolve(args.out, DATA_ENV)
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    hosts = []
    if args.hosts:
        for n, f in enumerate(sorted(glob.glob(os.path.join(_resolve(args.hosts, DATA_ENV), "*.png")))):
            hosts.append(datakit.HostImage(f, datakit.load_image(f), Path(f).stem, 0))
    else:
        for n in range(args.count):
            hosts.append(datakit.HostImage(None, datakit.synthetic_host((args.size, args.size), rng),
                                           f"synth{n:05d}", 0))
    if not hosts:
        raise ValueError("no host images to embed")
    samples = []
    for i, host in enumerate(hosts):
        if args.crop:
            host = dataclasses.replace(host, pixels=datakit.center_crop(host.pixels, args.crop))
        s = datakit.synthetic_embed(host, args.region_side, args.psnr, rng)
        s.image_path = f"sample_{i:05d}.png"
        datakit.save_png(os.path.join(out, s.image_path), s.image)
        samples.append(s)
    with open(os.path.join(out, "samples.jsonl"), "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    write_run_metadata(out, argv, vars(args), args.seed)
    _emit({"samples": len(samples), "mean_psnr_db": float(np.mean([s.psnr_db for s in samples])), "out": out})
    return 0


def cmd_postprocess_wmss(args, argv):
    host = datakit.load_image(_resolve(args.host, DATA_ENV))
    embedded = datakit.load_image(_resolve(args.embedded, DATA_ENV))
    if host.shape != embedded.shape:
        raise ShapeError(f"host {host.shape} and embedded {embedded.shape} differ in shape")
    out = datakit.wmss_postprocess(host, embedded, tuple(args.rect), args.strength, args.border)
    out_path = _resolve(args.out, DATA_ENV)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    datakit.save_png(out_path, out)
    write_run_metadata(os.path.dirname(os.path.abspath(out_path)), argv, vars(args), args.seed)
    _emit({"out": out_path, "psnr_before_db": datakit.psnr(embedded, host),
           "psnr_after_db": datakit.psnr(datakit.load_image(out_path), host)})
    return 0


def cmd_make_manifest(args, argv):
    path = _resolve(args.samples, DATA_ENV)
    with open(path) as fh:
        samples = [datakit.EmbeddedSample.from_dict(json.loads(ln)) for ln in fh if ln.strip()]
    m = datakit.split_manifest(samples, args.seed, tuple(args.sizes))
    out = _resolve(args.out, DATA_ENV) if args.out else os.path.join(os.path.dirname(path), "manifest.jsonl")
    m.save(out)
    write_run_metadata(os.path.dirname(os.path.abspath(out)), argv, vars(args), args.seed)
    _emit({"manifest": out, "sizes": {k: len(m.subset(k)) for k in datakit.SPLITS}})
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    overrides = {}
    if args.aug_config:
        with open(args.aug_config) as fh:
            overrides = json.load(fh)
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, aug=args.aug,
                       seed=args.seed, ablation=args.ablation, augment=not args.no_augment,
                       aug_overrides=overrides, max_steps=args.max_steps)


def cmd_train(args, argv):
    from . import plotting
    from .trainer import evaluate_all, train

    manifest = datakit.DatasetManifest.load(_resolve(args.dataset, DATA_ENV))
    tc = _train_config(args)
    run_dir = _resolve(args.out, RUNS_ENV)
    os.makedirs(run_dir, exist_ok=True)
    write_run_metadata(run_dir, argv, {"train_config": _jsonable(tc.to_dict()),
                                       "model_config": _model_config(args).to_dict()}, args.seed)
    result = train(manifest, _model_config(args), tc, run_dir,
                   progress=lambda row: log.info("epoch %s: %s", row["epoch"], row))
    plotting.plot_training(result.history, os.path.join(run_dir, "training.png"))
    summary = {"run_dir": run_dir, "checkpoint": result.checkpoint_path, "best_epoch": result.best_epoch,
               "best_val_iou": result.best_val_iou, "epochs_run": len(result.history) - 1}
    test = manifest.subset("test")
    if test:
        report = evaluate_all(result.model, test, tc.aug, tc.seed, manifest.image_of, tc.aug_config(),
                              result.model.config.hash())
        with open(os.path.join(run_dir, "report.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        summary["test_iou"] = report.iou
    _emit(summary)
    return 0


def cmd_eval(args, argv):
    from . import plotting
    from .distortion import DISTORTION_KEYS, config_for_distortion
    from .model import load_checkpoint
    from .trainer import evaluate_all

    model, meta = load_checkpoint(_resolve(args.ckpt, RUNS_ENV))
    family = args.aug or meta.get("aug", "ss")
    keys = list(DISTORTION_KEYS[family]) if args.distortion == "all" else [args.distortion]
    for k in keys:
        config_for_distortion(family, k)
    manifest = datakit.DatasetManifest.load(_resolve(args.dataset, DATA_ENV))
    samples = manifest.subset(args.split)
    if not samples:
        raise ValueError(f"manifest has no {args.split!r} samples")
    report = evaluate_all(model, samples, family, args.seed, manifest.image_of, None,
                          model.config.hash(), keys)
    doc = report.to_dict()
    doc["entries"] = [_jsonable(e) for e in report.entries]
    if args.out:
        out = _resolve(args.out, RUNS_ENV)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "report.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        with open(os.path.join(out, "report.csv"), "w") as fh:
            fh.write("distortion,mean_iou,count,raster_fallbacks,mean_vertex_error\n")
            for e in report.entries:
                fh.write(f"{e.distortion},{e.mean_iou:.4f},{e.count},{e.raster_fallbacks},{e.mean_vertex_error:.4f}\n")
        plotting.plot_iou_by_distortion({"DBDH": report.iou}, os.path.join(out, "iou_by_distortion.png"))
        write_run_metadata(out, argv, {"checkpoint": args.ckpt, "family": family, "split": args.split}, args.seed)
    _emit(doc)
    if args.pretty:
        print("\t".join(["distortion", "IoU(%)", "n"]))
        for e in report.entries:
            print(f"{e.distortion}\t{e.mean_iou:.1f}\t{e.count}")
    return 0


def cmd_localize(args, argv):
    from .geometry import CORNER_ORDER, decode_vertices, rectify

    predict, meta = load_predictor(_resolve(args.ckpt, RUNS_ENV))
    image = datakit.load_image(args.image)
    vertices = decode_vertices(predict(image))
    doc = {"vertices": vertices.tolist(), "order": CORNER_ORDER, "rectified": None}
    if args.rectify_out:
        if args.rectify_size:
            size = tuple(args.rectify_size)
        else:
            v = vertices
            w = int(round(max(np.linalg.norm(v[1] - v[0]), np.linalg.norm(v[2] - v[3])))) + 1
            h = int(round(max(np.linalg.norm(v[3] - v[0]), np.linalg.norm(v[2] - v[1])))) + 1
            size = (h, w)
        try:
            patch = rectify(image, vertices, size)
        except DegenerateRegionError as exc:
            raise DegenerateRegionError(f"predicted region cannot be rectified: {exc}") from exc
        datakit.save_png(args.rectify_out, patch)
        doc["rectified"] = args.rectify_out
    if args.overlay_out:
        from . import plotting
        plotting.plot_localization(image, vertices, args.overlay_out)
        doc["overlay"] = args.overlay_out
    out_dir = os.path.dirname(os.path.abspath(args.rectify_out or args.overlay_out or "")) \
        if (args.rectify_out or args.overlay_out) else None
    if out_dir:
        write_run_metadata(out_dir, argv, {"checkpoint": args.ckpt, "image": args.image}, args.seed)
    _emit(doc)
    return 0


def cmd_ablate(args, argv):
    from . import plotting
    from .trainer import format_table, run_ablation_grid

    manifest = datakit.DatasetManifest.load(_resolve(args.dataset, DATA_ENV))
    tc = _train_config(args)
    run_dir = _resolve(args.out, RUNS_ENV)
    os.makedirs(run_dir, exist_ok=True)
    write_run_metadata(run_dir, argv, {"train_config": _jsonable(tc.to_dict()), "modes": args.modes}, args.seed)
    rows = run_ablation_grid(manifest, _model_config(args), tc, args.modes, args.split, run_dir)
    table = format_table(rows, tc.aug)
    with open(os.path.join(run_dir, "ablation.tsv"), "w") as fh:
        fh.write(table + "\n")
    doc = [{"id": r["id"], "mode": r["mode"], "texture_branch": r["texture_branch"],
            "segmentation_head": r["segmentation_head"], "iou": r["report"].iou} for r in rows]
    with open(os.path.join(run_dir, "ablation.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    plotting.plot_iou_by_distortion({f"ID-{r['id']}": r["report"].iou for r in rows},
                                    os.path.join(run_dir, "ablation.png"))
    _emit({"rows": doc, "table": os.path.join(run_dir, "ablation.tsv")})
    return 0


def load_predictor(path):
    from .trainer import load_predictor as _load
    return _load(path)


# ---------------------------------------------------------------- parser

def _add_train_args(p):
    p.add_argument("--dataset", required=True, help="manifest.jsonl")
    p.add_argument("--aug", choices=["ss", "pimog"], default="ss")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--aug-config", help="JSON file overriding augmentation fields")
    p.add_argument("--model-config", help="JSON file with ModelConfig fields")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dbdh", description="Watermark-region localization toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("profile", cmd_profile, "analytic mult-adds of the default network")
    p.add_argument("--height", type=int, default=900)
    p.add_argument("--width", type=int, default=900)
    p.add_argument("--include-seg-head", action="store_true")

    p = add("prepare-hosts", cmd_prepare_hosts, "resize 2K images and cut 900x900 tiles")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)

    p = add("embed-synthetic", cmd_embed_synthetic, "surrogate embedding into host tiles or synthetic hosts")
    p.add_argument("--hosts", help="directory of host PNGs; omit to draw synthetic hosts")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--crop", type=int, default=None, help="centre-crop hosts first (300 for the screen-shooting set)")
    p.add_argument("--region-side", type=int, default=128)
    p.add_argument("--psnr", type=float, default=40.0)
    p.add_argument("--out", required=True)

    p = add("postprocess-wmss", cmd_postprocess_wmss, "scale an embedding residual and restore its border")
    p.add_argument("--host", required=True)
    p.add_argument("--embedded", required=True)
    p.add_argument("--rect", type=int, nargs=4, metavar=("X0", "Y0", "X1", "Y1"), required=True)
    p.add_argument("--strength", type=float, default=0.6)
    p.add_argument("--border", type=int, default=10)
    p.add_argument("--out", required=True)

    p = add("make-manifest", cmd_make_manifest, "seeded train/val/test split of a samples.jsonl")
    p.add_argument("--samples", required=True)
    p.add_argument("--sizes", type=int, nargs=3, default=list(datakit.PAPER_SPLIT))
    p.add_argument("--out", default=None)

    p = add("train", cmd_train, "train one model")
    _add_train_args(p)
    p.add_argument("--ablation", choices=["full", "id1", "id2", "id3"], default="full")

    p = add("eval", cmd_eval, "per-distortion IoU of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=list(datakit.SPLITS), default="test")
    p.add_argument("--aug", choices=["ss", "pimog"], default=None)
    p.add_argument("--distortion", default="all")
    p.add_argument("--out", default=None)
    p.add_argument("--pretty", action="store_true")

    p = add("localize", cmd_localize, "predict the embedded region of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--rectify-out", default=None)
    p.add_argument("--rectify-size", type=int, nargs=2, metavar=("H", "W"), default=None)
    p.add_argument("--overlay-out", default=None)

    p = add("ablate", cmd_ablate, "train and evaluate several ablation modes")
    _add_train_args(p)
    p.add_argument("--modes", nargs="+", choices=["full", "id1", "id2", "id3"], default=["full", "id1", "id2", "id3"])
    p.add_argument("--split", choices=list(datakit.SPLITS), default="test")
    p.set_defaults(ablation="full")
    return parser


def _diagnostic(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc).replace("\n", " ")}),
          file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _diagnostic("usage", exc)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args, argv)
    except (ValueError, ShapeError, DegenerateRegionError, FileNotFoundError, KeyError) as exc:
        _diagnostic("validation", exc)
        return 1
    except (DBDHError, RuntimeError, OSError, ArithmeticError) as exc:
        _diagnostic("runtime", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
