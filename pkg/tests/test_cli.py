import json
import math
from pathlib import Path

import numpy as np
import pytest

from dtr.cli import main
from dtr.config import ConfigError, parse_config
from dtr.data import write_idx

SMALL = ["--set", "dims.hidden=16", "--set", "dims.d_g=8", "--set", "dims.d_di=6", "--set", "dims.d_ds=4",
         "--set", "data.n_source=150", "--set", "data.n_target=150"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


def train_dir(capsys, tmp_path, *extra):
    code, out, err = run(capsys, "train", "--out", str(tmp_path), "--quiet", *SMALL, *extra)
    assert code == 0, err
    return Path(out)


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_empty_config_gives_defaults(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    cfg = parse_config(tmp_path / "c.json")
    t = cfg.train
    assert (t.alpha, t.beta, t.gamma, t.theta, t.r, t.tau) == (1.0, 0.15, 1.0, 0.05, 5, 0.9)
    assert cfg.data.rotation_deg == 45.0 and cfg.data.n_classes == 3


def test_zero_interval_is_config_error(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--set", "r=0")
    assert code == 2
    msg = json.loads(err)
    assert msg["error"] == "config" and msg["field"] == "r" and "r >= 1" in msg["message"]


def test_unknown_key_rejected(capsys, tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(None, ["train.learning_rate=0.1"])
    (tmp_path / "c.json").write_text(json.dumps({"train": {"optim": {"nesterov": True}}}))
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--config", str(tmp_path / "c.json"))
    assert code == 2 and json.loads(err)["field"] == "train.optim.nesterov"


@pytest.mark.parametrize("override, field", [("tau=0.3", "tau"), ("beta=-1", "beta"),
                                             ("mode=full", "mode"), ("iterations=1.5", "train.iterations")])
def test_out_of_range_values(override, field):
    with pytest.raises(ConfigError) as info:
        parse_config(None, [override])
    assert info.value.field == field


def test_malformed_json(capsys, tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--config", str(tmp_path / "c.json"))
    assert code == 2 and "malformed" in json.loads(err)["message"]


def test_override_echoed_and_echo_reproduces(capsys, tmp_path):
    run_dir = train_dir(capsys, tmp_path, "--set", "mode=dtr", "--set", "tau=0.8", "--set", "iterations=20",
                        "--set", "log_interval=5")
    echo = json.loads((run_dir / "config.json").read_text())
    assert echo["train"]["tau"] == 0.8 and echo["train"]["mode"] == "dtr"
    code, out, _ = run(capsys, "train", "--out", str(tmp_path), "--quiet", "--config", str(run_dir / "config.json"))
    assert code == 0
    assert (Path(out) / "metrics.jsonl").read_bytes() == (run_dir / "metrics.jsonl").read_bytes()


@pytest.mark.parametrize("n, interval", [(500, 50), (120, 50)])
def test_metrics_line_count(capsys, tmp_path, n, interval):
    run_dir = train_dir(capsys, tmp_path, "--set", f"iterations={n}", "--set", f"log_interval={interval}")
    records = read_jsonl(run_dir / "metrics.jsonl")
    assert len(records) == math.ceil(n / interval)
    assert records[-1]["step"] == n and "acc_tgt_C_di" in records[-1]


def test_metrics_identical_across_runs(capsys, tmp_path):
    a = train_dir(capsys, tmp_path, "--set", "iterations=40", "--set", "log_interval=10")
    b = train_dir(capsys, tmp_path, "--set", "iterations=40", "--set", "log_interval=10")
    assert a != b
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_eval_reproduces_final_accuracies(capsys, tmp_path):
    run_dir = train_dir(capsys, tmp_path, "--set", "iterations=60", "--set", "log_interval=25")
    final = read_jsonl(run_dir / "metrics.jsonl")[-1]
    code, out, _ = run(capsys, "eval", "--out", str(tmp_path), "--quiet", "--checkpoint", str(run_dir / "checkpoint.json"))
    assert code == 0
    report = json.loads((Path(out) / "eval.json").read_text())
    assert report["step"] == 60
    for key, value in final.items():
        if key.startswith("acc_"):
            assert report[key] == value, key
    assert 0 <= report["a_distance_di"] <= 2


def test_eval_requires_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--out", str(tmp_path))
    assert code == 2 and "checkpoint" in err
    code, _, err = run(capsys, "eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "missing.json"))
    assert code == 1 and json.loads(err)["error"] == "io"


def test_eval_dimension_mismatch(capsys, tmp_path):
    run_dir = train_dir(capsys, tmp_path, "--set", "iterations=5")
    doc = json.loads((run_dir / "checkpoint.json").read_text())
    doc["config"]["train"]["dims"]["d_g"] = 9
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    code, _, err = run(capsys, "eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "bad.json"))
    assert code == 2 and "mismatch" in err


def test_export_four_projection_files(capsys, tmp_path):
    pre = train_dir(capsys, tmp_path, "--set", "iterations=0")
    post = train_dir(capsys, tmp_path, "--set", "iterations=30")
    code, out, _ = run(capsys, "export", "--out", str(tmp_path), "--checkpoint", str(post / "checkpoint.json"),
                       "--pre-checkpoint", str(pre / "checkpoint.json"))
    assert code == 0
    files = sorted(p.name for p in (Path(out) / "projections").iterdir())
    assert files == ["di_post.csv", "di_pre.csv", "raw_post.csv", "raw_pre.csv"]
    lines = (Path(out) / "projections" / "di_post.csv").read_text().splitlines()
    assert lines[0] == "x,y,label,domain" and len(lines) == 301


def test_sweep_and_ablate_tables(capsys, tmp_path):
    code, out, _ = run(capsys, "sweep", "--out", str(tmp_path), "--quiet", *SMALL, "--set", "iterations=20",
                       "--seeds", "0,1", "--r-values", "1,4")
    assert code == 0
    lines = (Path(out) / "tables" / "sensitivity.csv").read_text().splitlines()
    assert lines[0].startswith("r,mean,std") and len(lines) == 3
    code, out, _ = run(capsys, "ablate", "--out", str(tmp_path), "--quiet", *SMALL, "--set", "iterations=20",
                       "--n-seeds", "2")
    assert code == 0
    summary = json.loads((Path(out) / "summary.json").read_text())
    assert [r["method"] for r in summary["rows"]] == ["B", "D", "D+R", "DTR"] and summary["d_equals_d_r"]


def test_sweep_rejects_other_modes(capsys, tmp_path):
    code, _, err = run(capsys, "sweep", "--out", str(tmp_path), "--set", "mode=b")
    assert code == 2 and "dtr" in err


def test_divergence_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--quiet", *SMALL, "--set", "iterations=50",
                       "--set", "optim.lr=1e6", "--set", "optim.lr_g=1e6")
    assert code == 4 and json.loads(err)["error"] == "numeric"


def test_bad_idx_is_data_error(capsys, tmp_path):
    write_idx(tmp_path / "img", [[[0]]])
    write_idx(tmp_path / "lab", [0, 1])
    paths = [f"data.{k}={tmp_path / v}" for k, v in (("source_images", "img"), ("source_labels", "lab"),
                                                      ("target_images", "img"), ("target_labels", "lab"))]
    args = ["train", "--out", str(tmp_path), "--set", "data.kind=idx"]
    for p in paths:
        args += ["--set", p]
    code, _, err = run(capsys, *args)
    assert code == 3 and "count mismatch" in err


def test_env_var_overrides_out(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DTR_OUT", str(tmp_path / "env"))
    run_dir = train_dir(capsys, tmp_path / "flag", "--set", "iterations=2")
    assert run_dir.parent == tmp_path / "env"


def test_seed_flag_sets_both_seeds(capsys, tmp_path):
    run_dir = train_dir(capsys, tmp_path, "--set", "iterations=2", "--seed", "7")
    echo = json.loads((run_dir / "config.json").read_text())
    assert echo["train"]["seed"] == 7 and echo["data"]["seed"] == 7


def test_idx_training_smoke(capsys, tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 8)
    images = (rng.random((16, 20, 20)) * 255).astype(np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    args = ["train", "--out", str(tmp_path), "--quiet", "--set", "data.kind=idx", "--set", "data.n_classes=2",
            "--set", "data.per_class=6", "--set", "iterations=5", "--set", "batch_size=4"]
    for key in ("source_images", "target_images"):
        args += ["--set", f"data.{key}={tmp_path / 'img'}"]
    for key in ("source_labels", "target_labels"):
        args += ["--set", f"data.{key}={tmp_path / 'lab'}"]
    code, out, err = run(capsys, *args)
    assert code == 0, err
    echo = json.loads((Path(out) / "config.json").read_text())
    dims = echo["train"]["dims"]
    assert dims["input_dim"] == 256 and (dims["d_g"], dims["d_di"], dims["d_ds"]) == (128, 64, 16)
    code, out, err = run(capsys, *args, "--set", "dims.d_g=20")
    assert code == 0, err
    assert json.loads((Path(out) / "config.json").read_text())["train"]["dims"]["d_g"] == 20
