import json

import numpy as np
import pytest
from PIL import Image

from dbdh import cli
from dbdh.datakit import load_image
from dbdh.model import ModelConfig
from dbdh.supervision import render_heatmaps

TINY = ModelConfig(texture_channels=8, context_stem_channels=8, context_stage_channels=(8, 8, 8, 8),
                   context_out_channels=8, head_channels=8, ase_reduction=4)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[0])


def test_no_arguments_prints_usage(capsys):
    code, _, err = run(capsys)
    assert code == 1 and "usage" in err


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_profile(capsys):
    code, out, _ = run(capsys, "profile", "--height", "900", "--width", "900")
    doc = last_json(out)
    assert code == 0 and isinstance(doc["mult_adds"], int)
    assert doc["band"] == [0.75 * 30.71e9, 1.25 * 30.71e9] and doc["within_band"]


def test_validation_error_is_single_line_json(capsys):
    code, _, err = run(capsys, "profile", "--height", "0")
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["error"] == "validation"


@pytest.fixture
def dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code, _, _ = run(capsys, "embed-synthetic", "--count", "6", "--size", "64", "--region-side", "32",
                     "--seed", "3", "--out", str(out))
    assert code == 0
    code, text, _ = run(capsys, "make-manifest", "--samples", str(out / "samples.jsonl"),
                        "--sizes", "4", "1", "1", "--seed", "1")
    assert code == 0 and last_json(text)["sizes"] == {"train": 4, "val": 1, "test": 1}
    return out


def test_embed_and_manifest_outputs(dataset):
    assert (dataset / "manifest.jsonl").exists() and (dataset / "run_metadata.json").exists()
    meta = json.loads((dataset / "run_metadata.json").read_text())
    assert meta["seed"] == 1 and "jpeg" in meta["codecs"] and meta["command"][:2] == ["dbdh", "make-manifest"]
    rows = [json.loads(ln) for ln in (dataset / "samples.jsonl").read_text().splitlines()]
    assert all(39.8 <= r["psnr_db"] <= 40.2 for r in rows)


def test_embed_is_seeded(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "embed-synthetic", "--count", "2", "--size", "64", "--region-side", "32",
            "--seed", "9", "--out", str(tmp_path / name))
    assert (tmp_path / "a" / "samples.jsonl").read_text() == (tmp_path / "b" / "samples.jsonl").read_text()
    np.testing.assert_array_equal(load_image(tmp_path / "a" / "sample_00001.png"),
                                  load_image(tmp_path / "b" / "sample_00001.png"))


def test_data_dir_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DBDH_DATA_DIR", str(tmp_path))
    code, out, _ = run(capsys, "embed-synthetic", "--count", "1", "--size", "64", "--region-side", "32",
                       "--out", "rel")
    assert code == 0 and (tmp_path / "rel" / "sample_00000.png").exists()


def test_prepare_hosts(tmp_path, capsys):
    src = tmp_path / "raw"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        Image.fromarray((rng.random((120, 200, 3)) * 255).astype(np.uint8)).save(src / f"img{i}.png")
    (src / "broken.jpg").write_bytes(b"\x00\x01")
    code, out, _ = run(capsys, "prepare-hosts", "--input", str(src), "--out", str(tmp_path / "tiles"))
    doc = last_json(out)
    assert code == 0 and doc["tiles"] == 6 and len(doc["skipped"]) == 1
    assert load_image(tmp_path / "tiles" / "img0_t2.png").shape == (900, 900, 3)


def test_postprocess_wmss(tmp_path, capsys):
    rng = np.random.default_rng(1)
    host = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    emb = host.copy()
    emb[20:44, 20:44] = np.clip(emb[20:44, 20:44].astype(int) + 8, 0, 255)
    Image.fromarray(host).save(tmp_path / "h.png")
    Image.fromarray(emb).save(tmp_path / "e.png")
    code, out, _ = run(capsys, "postprocess-wmss", "--host", str(tmp_path / "h.png"), "--embedded",
                       str(tmp_path / "e.png"), "--rect", "20", "20", "44", "44", "--border", "2",
                       "--out", str(tmp_path / "p.png"))
    doc = last_json(out)
    assert code == 0 and doc["psnr_after_db"] > doc["psnr_before_db"]
    code, _, _ = run(capsys, "postprocess-wmss", "--host", str(tmp_path / "h.png"), "--embedded",
                     str(tmp_path / "e.png"), "--rect", "0", "0", "99", "99", "--out", str(tmp_path / "q.png"))
    assert code == 1


def test_localize_with_oracle_stub(dataset, tmp_path, capsys, monkeypatch):
    sample = json.loads((dataset / "samples.jsonl").read_text().splitlines()[0])
    truth = np.asarray(sample["vertices"])

    def fake_loader(path):
        return (lambda image: render_heatmaps(np.minimum(truth, 63), image.shape[:2])), {}

    monkeypatch.setattr(cli, "load_predictor", fake_loader)
    rect = tmp_path / "rect.png"
    code, out, _ = run(capsys, "localize", "--ckpt", "unused.pt", "--image", str(dataset / sample["image_path"]),
                       "--rectify-out", str(rect), "--overlay-out", str(tmp_path / "overlay.png"))
    doc = last_json(out)
    assert code == 0 and doc["order"] == "TL,TR,BR,BL" and doc["rectified"] == str(rect)
    assert np.abs(np.asarray(doc["vertices"]) - truth).max() <= 1
    assert load_image(rect).shape[:2] == (33, 33)
    assert (tmp_path / "overlay.png").exists()


def test_localize_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "localize", "--ckpt", str(tmp_path / "none.pt"), "--image", str(tmp_path / "x.png"))
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["type"] == "FileNotFoundError"


def test_train_then_eval(dataset, tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY.to_dict()))
    run_dir = tmp_path / "run"
    code, out, err = run(capsys, "train", "--dataset", str(dataset / "manifest.jsonl"), "--model-config", str(cfg),
                         "--epochs", "1", "--batch-size", "2", "--max-steps", "1", "--out", str(run_dir))
    assert code == 0, err
    doc = last_json(out)
    for name in ("config.json", "metrics.csv", "report.json", "training.png", "run_metadata.json",
                 "checkpoints/best.pt"):
        assert (run_dir / name).exists(), name
    assert set(doc["test_iou"]) == {"none", "blur", "color_jitter", "noise", "jpeg", "combined"}

    code, out, _ = run(capsys, "eval", "--ckpt", doc["checkpoint"], "--dataset", str(dataset / "manifest.jsonl"),
                       "--distortion", "none", "--pretty", "--out", str(tmp_path / "ev"))
    assert code == 0
    report = last_json(out)
    assert list(report["iou"]) == ["none"] and report["count"] == 1
    assert out.strip().splitlines()[1].split("\t") == ["distortion", "IoU(%)", "n"]
    assert (tmp_path / "ev" / "report.csv").exists() and (tmp_path / "ev" / "iou_by_distortion.png").exists()

    code, _, err = run(capsys, "eval", "--ckpt", doc["checkpoint"], "--dataset", str(dataset / "manifest.jsonl"),
                       "--distortion", "moire")
    assert code == 1 and "not valid" in err
