import json

import numpy as np
import pytest
from PIL import Image

from multiperso.backends import load_checkpoint, state_hash
from multiperso.cli import main


@pytest.fixture
def workspace(tmp_path, pretrained_path):
    ref = tmp_path / "ref"
    assert main(["toy-reference", "--out", str(ref)]) == 0
    subjects = json.loads((ref / "subjects.json").read_text())["subjects"]
    (tmp_path / "augment.json").write_text(json.dumps({
        "reference": "ref/reference.png",
        "masks": "ref/masks",
        "subjects": subjects,
        "backend": str(pretrained_path),
        "augment": {"n_prompts": 4},
    }))
    (tmp_path / "train.json").write_text(json.dumps({
        "subjects": subjects,
        "backend": str(pretrained_path),
        "phase1_steps": 3,
        "phase2_steps": 3,
    }))
    (tmp_path / "suite.json").write_text(json.dumps([
        {"category": "plain", "prompts": ["<asset0> in a comic."]},
        {"category": "interaction", "prompts": ["<asset0> and <asset1> in a comic."]},
    ]))
    return tmp_path


def test_toy_reference_outputs(workspace):
    ref = workspace / "ref"
    assert Image.open(ref / "reference.png").size == (64, 64)
    subjects = json.loads((ref / "subjects.json").read_text())["subjects"]
    assert subjects == [{"placeholder": "<asset0>", "class_noun": "circle"},
                        {"placeholder": "<asset1>", "class_noun": "square"}]
    masks = [np.asarray(Image.open(ref / "masks" / f"asset{k}.png")) for k in range(2)]
    assert all(m.any() for m in masks) and not (masks[0].astype(bool) & masks[1].astype(bool)).any()


def test_augment_train_eval(workspace, capsys):
    ws = workspace
    assert main(["augment", "--config", str(ws / "augment.json"), "--out", str(ws / "aug")]) == 0
    manifest = json.loads((ws / "aug" / "manifest.json").read_text())
    assert manifest["phrases"] == {"<asset0>": "red circle", "<asset1>": "blue square"}
    assert main(["train", "--config", str(ws / "train.json"), "--ref", str(ws / "ref" / "reference.png"),
                 "--masks", str(ws / "ref" / "masks"), "--aug-manifest", str(ws / "aug" / "manifest.json"),
                 "--out", str(ws / "run")]) == 0
    ck = load_checkpoint(ws / "run" / "checkpoint.safetensors")
    assert ck.extra["train_config"]["phase1_steps"] == 3
    assert ck.extra["registry"]["subjects"][0]["noun_phrase"] == "red circle"
    assert str(state_hash(ck.backend)) in capsys.readouterr().out
    assert main(["eval", "--checkpoint", str(ws / "run" / "checkpoint.safetensors"), "--suite", str(ws / "suite.json"),
                 "--n-per-prompt", "2", "--out", str(ws / "eval")]) == 0
    report = json.loads((ws / "eval" / "report.json").read_text())
    assert set(report["summaries"]) == {"plain", "interaction"}
    assert report["summaries"]["plain"]["clip_t"]["count"] == 2
    assert (ws / "eval" / "report.csv").exists()
    assert Image.open(ws / "eval" / "grid_interaction.png").size[0] == 2 * 64


def test_errors_exit_with_code_2(workspace, capsys):
    ws = workspace
    assert main(["train", "--config", str(ws / "train.json"), "--ref", str(ws / "ref" / "reference.png"),
                 "--masks", str(ws / "nowhere"), "--out", str(ws / "run")]) == 2
    bad = ws / "bad.json"
    bad.write_text("{not json")
    assert main(["augment", "--config", str(bad), "--out", str(ws / "aug")]) == 2
    assert main(["eval", "--checkpoint", str(ws / "augment.json"), "--out", str(ws / "e")]) == 2
    pretrained = json.loads((ws / "train.json").read_text())["backend"]
    assert main(["eval", "--checkpoint", pretrained, "--out", str(ws / "e")]) == 2
    assert "no subject registry" in capsys.readouterr().err
