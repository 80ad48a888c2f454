import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from helpers import anomaly_manifest, image_list, self_prediction_manifest, tree_bytes
from segrobust import __version__
from segrobust.cli import RunConfig, build_parser, config_from_args, run
from segrobust.labelmap import EVAL_REPORT_SCHEMA, load_manifest
from segrobust.metrics import write_features


def _report(path):
    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, EVAL_REPORT_SCHEMA)
    return doc


def test_version(capsys):
    assert run(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_missing_manifest_names_flag(capsys, tmp_path):
    assert run(["morph", "--out", str(tmp_path / "o")]) == 2
    assert "--manifest" in capsys.readouterr().err


@pytest.mark.parametrize("argv,flag", [
    (["morph", "--manifest", "m.json", "--severities", "2,1"], "--severities"),
    (["morph", "--manifest", "m.json", "--severities", "a"], "--severities"),
    (["inject", "--manifest", "m.json", "--bank", "b", "--mode", "corrupted"], "--seed"),
    (["inject", "--manifest", "m.json", "--bank", "b", "--mode", "outlier", "--seed", "1"], "--relabel"),
    (["inject", "--manifest", "m.json", "--bank", "b", "--mode", "corrupted", "--seed", "1", "--count", "3:1"],
     "--count"),
    (["eval-seg", "--manifest", "m.json", "--workers", "0"], "--workers"),
])
def test_usage_errors_exit_2(capsys, tmp_path, argv, flag):
    assert run(argv + ["--out", str(tmp_path / "o")]) == 2
    assert flag in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_runtime_error_exit_1(tmp_path, capsys):
    assert run(["eval-seg", "--manifest", str(tmp_path / "missing.json"), "--out", "-"]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_config_digest_ignores_workers_and_out():
    p = build_parser()
    base = ["inject", "--manifest", "m", "--bank", "b", "--mode", "corrupted", "--seed", "3"]
    a = config_from_args(p.parse_args(base + ["--workers", "1", "--out", "x"]))
    b = config_from_args(p.parse_args(base + ["--workers", "4", "--out", "y"]))
    c = config_from_args(p.parse_args(base[:-1] + ["4", "--out", "x"]))
    assert a.digest() == b.digest() != c.digest()
    assert RunConfig("frechet", {"a": 1}).digest() == RunConfig("frechet", {"a": 1}).digest()


def test_morph_deterministic_across_runs_and_workers(toy_dataset, tmp_path):
    args = ["morph", "--manifest", str(toy_dataset), "--severities", "1,2", "--shape", "disk"]
    assert run(args + ["--workers", "1", "--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--workers", "4", "--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["dilate_disk_r1", "dilate_disk_r2"]
    prov = json.loads((tmp_path / "a" / "dilate_disk_r1" / "manifest.json").read_text())["provenance"]
    assert prov["item_count"] == 5 and prov["tool_version"] == __version__


def test_morph_custom_order(toy_dataset, tmp_path):
    (tmp_path / "o.json").write_text(json.dumps({"ranks": {"0": 1}}))
    assert run(["morph", "--manifest", str(toy_dataset), "--severities", "1", "--order", str(tmp_path / "o.json"),
                "--out", str(tmp_path / "m")]) == 0
    out = load_manifest(tmp_path / "m" / "dilate_square_r1" / "manifest.json")
    src = load_manifest(toy_dataset)
    # Road dominates everything it touches.
    grown = out.load_label(out.items[0]).data == 0
    assert grown.sum() > (src.load_label(src.items[0]).data == 0).sum()


def test_failed_run_leaves_no_output(toy_dataset, tmp_path):
    (tmp_path / "o.json").write_text(json.dumps({"ranks": {"40": 1}}))
    rc = run(["morph", "--manifest", str(toy_dataset), "--order", str(tmp_path / "o.json"),
              "--out", str(tmp_path / "m")])
    assert rc == 1
    assert not (tmp_path / "m").exists()
    assert not list(tmp_path.glob(".m.*"))


def test_interrupted_generation_replaces_nothing(toy_dataset, tmp_path, monkeypatch):
    out = tmp_path / "m"
    assert run(["morph", "--manifest", str(toy_dataset), "--severities", "1", "--out", str(out)]) == 0
    before = tree_bytes(out)

    import segrobust.morphology as morph

    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(morph, "save_manifest", boom)
    with pytest.raises(KeyboardInterrupt):
        run(["morph", "--manifest", str(toy_dataset), "--severities", "1,2", "--out", str(out)])
    assert tree_bytes(out) == before
    assert not list(tmp_path.glob(".m.*"))


def test_inject_and_extract(toy_dataset, tmp_path):
    assert run(["extract-masks", "--manifest", str(toy_dataset), "--classes", "7,5", "--classes", "13",
                "--out", str(tmp_path / "bank")]) == 0
    index = json.loads((tmp_path / "bank" / "index.json").read_text())
    assert index["class_filter"] == [[5, 7], [13]] and index["entries"]
    args = ["inject", "--manifest", str(toy_dataset), "--bank", str(tmp_path / "bank"),
            "--mode", "corrupted", "--seed", "7", "--count", "1:3"]
    assert run(args + ["--workers", "1", "--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--workers", "4", "--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    lines = (tmp_path / "a" / "injections.jsonl").read_text().splitlines()
    assert len(lines) == 5 and all(1 <= len(json.loads(x)["injections"]) <= 3 for x in lines)


def test_eval_seg_identity(toy_dataset, tmp_path, capsys):
    m = self_prediction_manifest(toy_dataset, tmp_path / "pred.json")
    assert run(["eval-seg", "--manifest", str(m), "--out", str(tmp_path / "r.json")]) == 0
    doc = _report(tmp_path / "r.json")
    assert doc["metrics"] == {"miou": 1.0}
    assert doc["provenance"]["item_count"] == 5
    assert run(["eval-seg", "--manifest", str(m), "--out", "-"]) == 0
    jsonschema.validate(json.loads(capsys.readouterr().out), EVAL_REPORT_SCHEMA)


def test_eval_seg_with_scores(tmp_path):
    from segrobust.labelmap import LabelMap, save_label_map, write_score_map

    gt = np.array([[0, 1], [1, 255]], dtype=np.uint8)
    save_label_map(LabelMap(gt, 2), tmp_path / "gt.png")
    save_label_map(LabelMap(np.array([[0, 1], [0, 0]], dtype=np.uint8), 2), tmp_path / "pr.png")
    probs = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.6, 0.4], [0.5, 0.5]]], dtype=np.float32)
    write_score_map(probs, tmp_path / "s.smap")
    (tmp_path / "m.json").write_text(json.dumps({"n_classes": 2, "items": [
        {"id": "a", "label": "gt.png", "prediction": "pr.png", "scores": "s.smap"}]}))
    assert run(["eval-seg", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "r.json")]) == 0
    doc = _report(tmp_path / "r.json")
    # IoU class0 = 1/2, class1 = 1/2; NLL over 3 valid pixels.
    assert doc["metrics"]["miou"] == pytest.approx(0.5)
    assert doc["metrics"]["nll"] == pytest.approx(-(np.log(0.9) + np.log(0.8) + np.log(0.4)) / 3, rel=1e-6)
    assert doc["details"]["calibrated_pixels"] == 3


def test_outlier_then_eval_ood(toy_dataset, tmp_path):
    assert run(["silhouettes", "--out", str(tmp_path / "sil")]) == 0
    assert run(["inject", "--manifest", str(toy_dataset), "--bank", str(tmp_path / "sil"), "--mode", "outlier",
                "--relabel", "11", "--seed", "2", "--out", str(tmp_path / "out")]) == 0
    m = anomaly_manifest(tmp_path / "out" / "manifest.json", tmp_path / "ood.json")
    assert run(["eval-ood", "--manifest", str(m), "--out", str(tmp_path / "r.json")]) == 0
    metrics = _report(tmp_path / "r.json")["metrics"]
    assert set(metrics) == {"auroc", "aupr", "fpr95"}
    assert metrics["auroc"] > 0.8


def test_frechet_command(tmp_path, rng):
    write_features(rng.normal(size=(500, 3)), tmp_path / "a.fvec")
    write_features(rng.normal(size=(500, 3)) + 1.0, tmp_path / "b.fvec")
    assert run(["frechet", "--features-a", str(tmp_path / "a.fvec"), "--features-b", str(tmp_path / "b.fvec"),
                "--out", str(tmp_path / "r.json")]) == 0
    doc = _report(tmp_path / "r.json")
    assert doc["metrics"]["frechet_distance"] == pytest.approx(3.0, rel=0.15)
    assert doc["provenance"]["item_count"] == 1000


def test_spectral_command(toy_dataset, tmp_path):
    lst = image_list(toy_dataset, tmp_path / "imgs.txt")
    for rate in ("0", "2"):
        assert run(["spectral", "--set-a", str(lst), "--set-b", str(lst), "--filter-rate", rate,
                    "--out", str(tmp_path / f"r{rate}.json")]) == 0
        doc = _report(tmp_path / f"r{rate}.json")
        assert doc["metrics"]["spectral_distance"] == 0.0
