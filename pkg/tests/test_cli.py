import json

import numpy as np
import pytest
import yaml

from sapbench.cli import main
from sapbench.config import load_config, parse_config
from sapbench.dataio import read_tensor
from sapbench.errors import ConfigError
from sapbench.metrics import read_sweep_csv
from sapbench.runner import check_export

BASE = {
    "seed": 3,
    "precision": "float64",
    "data": {"synth": {"n_per_class": 6, "classes": 3, "image_size": 6, "noise_std": 30, "contrast": 0.5},
             "eval_n_per_class": 4},
    "model": {"preset": "cnn", "channels": [2, 3]},
    "train": {"epochs": 2, "batch_size": 6, "lr_schedule": [[0, 0.02]]},
    "defense": [{"kind": "dense"}, {"kind": "sap", "k": 100}],
    "attack": [{"kind": "fgsm", "gradient_source": "defended"}],
    "eval": {"lambdas": [0, 2], "n_passes": 2, "mc_samples": [1, 3], "block_size": 5},
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


@pytest.fixture
def trained(tmp_path):
    cfg = _write(tmp_path, BASE)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    return cfg, tmp_path / "run" / "checkpoint"


def test_config_errors_carry_section_path():
    with pytest.raises(ConfigError, match=r"train\.lr_schedule"):
        parse_config({**BASE, "train": {"lr_schedule": [[0, -1]]}})
    with pytest.raises(ConfigError, match=r"eval\.lambdas"):
        parse_config({**BASE, "eval": {"lambdas": [-1]}})
    with pytest.raises(ConfigError, match="bogus"):
        parse_config({**BASE, "bogus": 1})


def test_json_config_accepted(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(BASE))
    assert load_config(p).seed == 3


def test_missing_dataset_path_fails_before_compute(tmp_path):
    cfg = _write(tmp_path, {**BASE, "data": {"train_path": "nope", "eval_path": "nope"}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
    assert not (tmp_path / "run").exists()


def test_train_then_eval(trained, tmp_path):
    cfg, ckpt = trained
    assert (tmp_path / "run" / "history.csv").read_text().startswith("epoch,split,loss,accuracy\n")
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert "checkpoint/model.json" in manifest["outputs"] and manifest["seed"] == 3
    assert main(["eval", "--config", str(cfg), "--model", str(ckpt), "--out", str(tmp_path / "ev")]) == 0
    rows = read_sweep_csv((tmp_path / "ev" / "sweep.csv").read_text())
    keys = {(r.defense, r.lam, r.mc_samples) for r in rows}
    assert keys == {("dense", 0.0, 0), ("dense", 2.0, 0), ("sap-100", 0.0, 1), ("sap-100", 0.0, 3),
                    ("sap-100", 2.0, 1), ("sap-100", 2.0, 3)}
    assert len(list((tmp_path / "ev" / "calibration").iterdir())) == len(rows)


def test_train_rerun_identical_history(trained, tmp_path):
    cfg, _ = trained
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run2")]) == 0
    assert (tmp_path / "run" / "history.csv").read_bytes() == (tmp_path / "run2" / "history.csv").read_bytes()


def test_eval_rerun_byte_identical_across_threads(trained, tmp_path):
    cfg, ckpt = trained
    for name, threads in (("a", "1"), ("b", "3")):
        assert main(["eval", "--config", str(cfg), "--model", str(ckpt), "--out", str(tmp_path / name),
                     "--threads", threads]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_empty_attack_list_is_clean_only(trained, tmp_path):
    _, ckpt = trained
    cfg = _write(tmp_path, {**BASE, "attack": []}, "clean.yaml")
    assert main(["eval", "--config", str(cfg), "--model", str(ckpt), "--out", str(tmp_path / "c")]) == 0
    rows = read_sweep_csv((tmp_path / "c" / "sweep.csv").read_text())
    assert [r.attack for r in rows] == ["none", "none"]


def test_incompatible_checkpoint(trained, tmp_path):
    _, ckpt = trained
    cfg = _write(tmp_path, {**BASE, "model": {"preset": "cnn", "channels": [4, 4]}}, "other.yaml")
    assert main(["eval", "--config", str(cfg), "--model", str(ckpt), "--out", str(tmp_path / "x")]) == 2


def test_attack_export(trained, tmp_path):
    _, ckpt = trained
    cfg = _write(tmp_path, {**BASE, "attack": [{"kind": "fgsm", "integer_pixels": True},
                                               {"kind": "iterative", "step": 1.0}]}, "exp.yaml")
    assert main(["attack-export", "--config", str(cfg), "--model", str(ckpt), "--out", str(tmp_path / "x")]) == 0
    dirs = [d for d in (tmp_path / "x").iterdir() if d.is_dir()]
    assert dirs
    for d in dirs:
        meta = json.loads((d / "attack.json").read_text())
        res = check_export(d)
        assert res["within_ball"] and res["within_box"]
        if meta["lambda"] == 0:
            assert read_tensor(d / "x.sapt").data.tobytes() == read_tensor(d / "x_adv.sapt").data.tobytes()
        elif meta["integer_pixels"]:
            x = read_tensor(d / "x_adv.sapt").data
            assert np.all(x == np.rint(x))


def test_dataset_synth(tmp_path):
    assert main(["dataset-synth", "--out", str(tmp_path / "ds"), "--n-per-class", "2", "--classes", "3",
                 "--image-size", "4"]) == 0
    assert (tmp_path / "ds" / "train" / "images.sapt").is_file()
    assert read_tensor(tmp_path / "ds" / "train" / "labels.sapt").shape == (6,)


def test_verify(trained, capsys):
    _, ckpt = trained
    assert main(["verify", "--model", str(ckpt), "--sap-instances", "2000"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") >= 7


def test_exit_codes(tmp_path):
    assert main(["eval", "--config", str(tmp_path / "missing.yaml"), "--model", "x", "--out", "y"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [unclosed")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["verify", "--model", str(tmp_path)]) == 2
    d = tmp_path / "data"
    d.mkdir()
    (d / "images.sapt").write_bytes(b"XXXX")
    (d / "labels.sapt").write_bytes(b"XXXX")
    cfg = _write(tmp_path, {**BASE, "data": {"train_path": "data", "eval_path": "data"}}, "d.yaml")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_divergence_exit_code(tmp_path):
    cfg = _write(tmp_path, {**BASE, "train": {"epochs": 2, "batch_size": 3, "lr_schedule": [[0, 1e300]], "momentum": 0}})
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
