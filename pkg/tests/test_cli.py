import json

import numpy as np
import pytest
import yaml

from medovd.cli import main
from medovd.synthetic import make_volumes


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "12", "--seed", "1"]) == 0
    cfg = {
        "epochs": 1, "batch_size": 6, "seed": 0, "vocab_size": 4,
        "pseudo_labeling": True, "feature_substitution": True,
        "thresholds": {"iou_threshold": 0.3, "confidence_threshold": 0.9, "expand_factor": 1.3, "max_subs": 5},
        "data": {"train": "data/synth.jsonl", "matrix": "data/matrix.csv", "out_dir": "run"},
    }
    (root / "train.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train", str(root / "train.yaml")]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    assert {"last.pt", "audit.jsonl", "loss_curve.csv", "config.yaml"} <= {p.name for p in run.iterdir()}
    assert len((run / "loss_curve.csv").read_text().splitlines()) == 1 + 2


def test_matrix_validate_exit_codes(workspace, tmp_path):
    data = workspace / "data"
    assert main(["matrix", "validate", str(data / "matrix.csv"), str(data / "synth.jsonl")]) == 0
    text = (data / "matrix.csv").read_text().replace("synth,1", "synth,-1", 1)
    (tmp_path / "bad.csv").write_text(text)
    assert main(["matrix", "validate", str(tmp_path / "bad.csv"), str(data / "synth.jsonl")]) == 1
    (tmp_path / "broken.csv").write_text("dataset,liver\nsynth,2\n")
    assert main(["matrix", "validate", str(tmp_path / "broken.csv"), str(data / "synth.jsonl")]) == 2


def test_eval_writes_json_and_table(workspace, capsys):
    out = workspace / "report.json"
    assert main(["eval", str(workspace / "run" / "last.pt"), str(workspace / "data" / "synth.jsonl"),
                 "--out", str(out), "--novel", "tumor"]) == 0
    rep = json.loads(out.read_text())
    assert rep["n_classes"]["novel"] == 1 and "base+novel" in rep["metrics"]["all"]
    assert out.with_suffix(".txt").read_text().startswith("scope")
    assert "mAP50" in capsys.readouterr().out


def test_fps_visualize_audit(workspace, capsys):
    ck, recs = str(workspace / "run" / "last.pt"), str(workspace / "data" / "synth.jsonl")
    assert main(["fps", ck, recs, "--warmup", "2", "--runs", "2"]) == 0
    assert "cv" in capsys.readouterr().out
    assert main(["visualize", ck, recs, "--out", str(workspace / "viz"), "--limit", "3"]) == 0
    assert len(list((workspace / "viz").glob("*.png"))) == 3
    assert main(["audit", str(workspace / "run" / "audit.jsonl")]) == 0
    assert "total" in capsys.readouterr().out


def test_curate_command(tmp_path):
    vols = make_volumes(6, ["liver", "kidney"], seed=0, dataset_id="ds")
    entries = []
    for v in vols:
        np.save(tmp_path / f"{v.volume_id}_i.npy", v.image_data)
        np.save(tmp_path / f"{v.volume_id}_l.npy", v.label_data)
        entries.append({"volume_id": v.volume_id, "image": f"{v.volume_id}_i.npy", "label": f"{v.volume_id}_l.npy",
                        "modality": "CT", "label_names": {1: "liver", 2: "kidney"}})
    (tmp_path / "ds.yaml").write_text(yaml.safe_dump({"dataset_id": "ds", "volumes": entries}))
    assert main(["curate", str(tmp_path / "ds.yaml"), "--out", str(tmp_path / "out"), "--val-fraction", "0.2"]) == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert len(manifest["train_volume_ids"]) == 5 and len(manifest["val_volume_ids"]) == 1


def test_train_config_errors(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"epochs": 1, "data": {"train": "x.jsonl"}}))
    assert main(["train", str(tmp_path / "c.yaml")]) == 2
    assert "out_dir" in capsys.readouterr().err
