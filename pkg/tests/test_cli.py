import csv
import json

import numpy as np
import pytest

from medsnet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, default_config, main
from medsnet.mip import SLAB_THICKNESSES_MM
from medsnet.preprocess import normalized_from_hu
from medsnet.volume import read_volume

OUR_FRAMEWORK = (0.883, 0.915, 0.928, 0.941, 0.953, 0.962, 0.968)

TOY_CONFIG = {
    "phantom": {"volume_shape": [20, 40, 40], "spacing_mm": [1.25, 1.0, 1.0], "n_nodules": 2,
                "nodule_diameter_range_mm": [4.0, 7.0], "n_vessels": 2},
    "preprocess": {"closing_radius": 1, "dilation_radius": 2, "crop_size": 32},
    "model": {"base_width": 2, "encoder_depth": 3, "input_size": 32, "num_aux_detectors": 2,
              "patch_depth": 5, "dense_growth": 2, "dense_width": 2, "head_width": 2},
    "train": {"batch_size": 4, "max_epochs": 1, "max_positives_per_scan": 4},
}


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root):
    """File contents under ``root`` keyed by relative path, manifests excluded."""
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    assert run("phantom", "--config", cfg, "--seed", 11, "--count", 8, "--out", root / "raw") == EXIT_OK
    assert run("preprocess", root / "raw", "--config", cfg, "--out", root / "pre", "--jobs", 2) == EXIT_OK
    return root, cfg


def test_show_config(capsys):
    assert main(["--show-config"]) == EXIT_OK
    shown = json.loads(capsys.readouterr().out)
    assert shown == json.loads(json.dumps(default_config()))
    assert shown["candidates"]["bin_threshold"] == 0.5
    assert shown["train"]["beta2"] == 0.999


def test_phantom_outputs(workspace):
    root, _ = workspace
    sidecars = sorted((root / "raw").glob("phantom-*.json"))
    assert len(sidecars) == 8
    assert (root / "raw" / "manifest.json").exists()
    manifest = json.loads((root / "raw" / "manifest.json").read_text())
    assert manifest["command"] == "phantom" and manifest["seed"] == 11
    assert len(list((root / "raw").glob("*_annotations.csv"))) == 8


def test_preprocess_then_mip_chain(workspace, tmp_path):
    root, cfg = workspace
    pre = sorted((root / "pre").glob("phantom-*.json"))
    assert len(pre) == 8
    vol = read_volume(pre[0])
    assert vol.shape[1:] == (32, 32) and vol.spacing_mm[0] == 1.0
    assert run("mip", pre[0], "--config", cfg, "--png", "--out", tmp_path) == EXIT_OK
    sid = vol.scan_id
    fwd = np.load(tmp_path / f"{sid}_forward.npy")
    bwd = np.load(tmp_path / f"{sid}_backward.npy")
    norm = normalized_from_hu(vol).voxels
    assert fwd.shape == (vol.shape[0], 3, 32, 32)
    for c in (0, vol.shape[0] // 2, vol.shape[0] - 1):
        for j, t in enumerate(SLAB_THICKNESSES_MM):
            np.testing.assert_array_equal(fwd[c, j], norm[c:c + t].max(axis=0))
            np.testing.assert_array_equal(bwd[c, j], norm[max(c - t + 1, 0):c + 1].max(axis=0))
            assert np.all(fwd[c, j] >= norm[c])
    assert len(list(tmp_path.glob("*.png"))) == 6
    assert json.loads((tmp_path / "index.json").read_text())["scans"][sid]


def test_outputs_idempotent(workspace, tmp_path):
    root, cfg = workspace
    for name in ("a", "b"):
        d = tmp_path / name
        assert run("phantom", "--config", cfg, "--seed", 3, "--out", d / "raw") == EXIT_OK
        assert run("preprocess", d / "raw", "--config", cfg, "--out", d / "pre") == EXIT_OK
        assert run("mip", d / "pre", "--config", cfg, "--out", d / "mip") == EXIT_OK
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_train_infer_evaluate(workspace, tmp_path):
    root, cfg = workspace
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"train_{name}"
        assert run("train", "--config", cfg, "--data", root / "pre", "--annotations", root / "raw",
                   "--max-epochs", 1, "--out", out) == EXIT_OK
        outs.append(out)
    rows = list(csv.DictReader((outs[0] / "metrics.csv").open()))
    assert len(rows) == 1
    assert (outs[0] / "checkpoint.pt").exists()
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "checkpoint.pt").read_bytes() == (outs[1] / "checkpoint.pt").read_bytes()

    fold = json.loads((outs[0] / "fold.json").read_text())
    test_ids = fold["test_ids"]
    scans = tmp_path / "scans.txt"
    scans.write_text("\n".join(test_ids) + "\n")
    vols = [root / "pre" / f"{sid}.json" for sid in test_ids]
    cands = tmp_path / "infer" / "candidates.csv"
    assert run("infer", *vols, "--config", cfg, "--checkpoint", outs[0] / "checkpoint.pt",
               "--tau", 0.1, "--save-probabilities", "--out", cands, "--jobs", 2) == EXIT_OK
    header = cands.read_text().splitlines()[0]
    assert header.startswith("scan_id,z0,y0,x0,z1,y1,x1")
    assert len(list((tmp_path / "infer").glob("*_probabilities.npz"))) == len(test_ids)

    anns = [root / "raw" / f"{sid}_annotations.csv" for sid in test_ids]
    ev = tmp_path / "eval"
    assert run("evaluate", "--candidates", cands, "--annotations", *anns, "--scans", scans,
               "--out", ev) == EXIT_OK
    report = dict(line.split("\t") for line in (ev / "report.tsv").read_text().splitlines())
    assert int(report["scans"]) == len(test_ids)
    assert 0.0 <= float(report["cpm"]) <= 1.0
    assert run("plot-froc", ev / "froc.csv", "--labels", "toy", "--out", tmp_path / "froc.svg") == EXIT_OK
    svg = (tmp_path / "froc.svg").read_text()
    assert svg.startswith("<?xml") and "toy" in svg


def test_evaluate_fixture_curve(tmp_path, capsys):
    curve = tmp_path / "curve.csv"
    curve.write_text("fp_per_scan,sensitivity\n" + "".join(
        f"{p},{s}\n" for p, s in zip((0.125, 0.25, 0.5, 1, 2, 4, 8), OUR_FRAMEWORK)))
    assert run("evaluate", "--curve", curve, "--out", tmp_path / "ev") == EXIT_OK
    out = capsys.readouterr().out
    assert "cpm\t0.9357" in out
    report = dict(l.split("\t") for l in (tmp_path / "ev" / "report.tsv").read_text().splitlines())
    assert float(report["cpm"]) == pytest.approx(0.936, abs=5e-4)


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["phantom", "--bogus", "--out", str(tmp_path)])
    assert e.value.code == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rat": 1.0}}))
    with pytest.raises(SystemExit) as e:
        main(["phantom", "--config", str(bad), "--out", str(tmp_path)])
    assert e.value.code == EXIT_USAGE
    assert "learning_rat" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["phantom", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)])
    assert e.value.code == EXIT_USAGE
    assert main(["preprocess", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "no such file" in capsys.readouterr().err
    curve = tmp_path / "c.csv"
    curve.write_text("fp,sens\n1,2\n")
    assert main(["evaluate", "--curve", str(curve), "--out", str(tmp_path / "e")]) == EXIT_DATA
