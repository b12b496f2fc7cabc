import json
import subprocess
import sys

import pytest

from diffseg.cli import main

TINY = ["num_masks=8", "num_layers=2", "dim=16", "heads=2", "backbone_widths=4,4,6,6,8,8", "batch_size=2",
        "iterations=2", "checkpoint_every=2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "train"), "--n", "4", "--seed", "0"]) == 0
    assert main(["gen-data", "--out", str(root / "val"), "--n", "2", "--seed", "1"]) == 0
    cfg = root / "tiny.yaml"
    cfg.write_text("\n".join(o.replace("=", ": ", 1) for o in TINY).replace("4,4,6,6,8,8", "[4, 4, 6, 6, 8, 8]"))
    assert main(["train", "--config", str(cfg), f"data_dir={root / 'train'}", f"out_dir={root / 'run'}"]) == 0
    return root


def test_infer_eval_visualize(workspace, capsys):
    root = workspace
    ckpt = root / "run" / "checkpoint.pt"
    assert ckpt.exists() and (root / "run" / "checkpoint_000002.pt").exists()
    assert main(["infer", "--checkpoint", str(ckpt), "--data", str(root / "val"), "--out", str(root / "p.jsonl"),
                 "object_threshold=0.0"]) == 0
    capsys.readouterr()
    assert main(["eval", "--predictions", str(root / "p.jsonl"), "--data", str(root / "val"),
                 "--out", str(root / "report.json"), "--config", str(root / "tiny.yaml")]) == 0
    table = capsys.readouterr().out
    assert "pq" in table and "miou" in table
    report = json.loads((root / "report.json").read_text())
    assert {"pq", "pq_thing", "pq_stuff", "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "miou"} <= set(report)
    assert main(["visualize", "--data", str(root / "val"), "--predictions", str(root / "p.jsonl"),
                 "--out", str(root / "o.png")]) == 0
    assert main(["visualize", "--data", str(root / "val"), "--mode", "diffusion", "--out", str(root / "d.png")]) == 0
    assert (root / "o.png").exists() and (root / "d.png").exists()


def test_ablate_steps(workspace, capsys):
    root = workspace
    assert main(["ablate", "--sweep", "steps=1,2", "--data", str(root / "val"),
                 "--checkpoint", str(root / "run" / "checkpoint.pt"), "--out", str(root / "abl.json")]) == 0
    rows = json.loads((root / "abl.json").read_text())
    assert [r["value"] for r in rows] == ["1", "2"]
    assert "AP50" in capsys.readouterr().out


def test_ablate_retrains_for_model_keys(workspace):
    root = workspace
    assert main(["ablate", "--config", str(root / "tiny.yaml"), f"data_dir={root / 'train'}", "iterations=1",
                 "--sweep", "num_layers=1,3", "--data", str(root / "val"), "--out-dir", str(root / "abl"),
                 "--out", str(root / "abl2.json")]) == 0
    assert (root / "abl" / "num_layers_3" / "checkpoint.pt").exists()


def test_errors_are_structured(workspace, capsys):
    root = workspace
    assert main(["train", "bogus_key=1"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "bogus_key" in err["message"]
    assert main(["infer", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--data", str(root / "val"),
                 "--out", str(root / "x.jsonl"), "dim=8"]) == 2
    capsys.readouterr()
    assert main(["eval", "--predictions", str(root / "nope.jsonl"), "--data", str(root / "val")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert "nope.jsonl" in err["message"]
    assert main(["infer", "--checkpoint", str(root / "p.jsonl"), "--data", str(root / "val"),
                 "--out", str(root / "y.jsonl")]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "diffseg", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "infer", "eval", "visualize", "ablate"):
        assert cmd in out.stdout
