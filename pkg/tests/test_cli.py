import json

import numpy as np
import pytest

from gdmpolicy import cli
from gdmpolicy import pipeline as pl
from gdmpolicy.config import ExperimentConfig
from gdmpolicy.io import read_networks

TINY = {
    "network": {"n_pairs": 4, "density": 1.92},
    "expert": {"t_total": 60, "t_burn": 10, "buffer_capacity": 40, "primal_steps": 10},
    "gnn": {"n_layers": 1, "features": 4, "filter_hops": 1, "embed_dim": 4},
    "schedule": {"n_steps": 10},
    "train": {"max_epochs": 2, "batch_graphs": 2, "signals_per_graph": 4, "validate_every": 1,
              "val_horizon": 5},
    "eval": {"horizon": 10, "checkpoints": [2, 10]},
    "splits": {"train": 2, "val": 1, "test": 1},
    "f_min_mode": "fp_percentile",
    "seed": 3,
}


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["pipeline", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["netgen", "--config", "no_such_preset", "--out", str(tmp_path / "n.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"network": {"n_pairs": 0}}))
    assert cli.main(["netgen", "--config", str(bad), "--out", str(tmp_path / "n.json")]) == 2
    assert cli.main(["netgen", "--jobs", "0", "--out", str(tmp_path / "n.json")]) == 2
    assert "error:" in capsys.readouterr().err


def test_split_16(tiny_cfg, tmp_path):
    out = tmp_path / "n.json"
    assert cli.main(["netgen", "--config", tiny_cfg, "--count", "16", "--out", str(out)]) == 0
    _, states, labels = read_networks(out)
    assert [labels.count(s) for s in ("train", "val", "test")] == [10, 2, 4]
    assert len(states) == 16


def test_pipeline_idempotent_and_integrity(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--config", tiny_cfg, "--out", str(out)]) == 0
    first = capsys.readouterr().out
    assert "stages run: netgen, expert, train, eval" in first
    manifest = (out / "manifest.json").read_bytes()
    m = json.loads(manifest)
    assert set(m["stages"]) == {"netgen", "expert", "train", "eval"}
    seeds = [s["seed"] for s in m["stages"].values()]
    assert len(set(seeds)) == 4
    summary = json.loads((out / "eval" / "summary.json").read_text())
    assert len(summary["comparison"]) == 4 * 2

    assert cli.main(["pipeline", "--config", tiny_cfg, "--out", str(out)]) == 0
    assert "stages run: none" in capsys.readouterr().out
    assert (out / "manifest.json").read_bytes() == manifest

    # tamper with the expert buffers: training must refuse
    doc = json.loads((out / "buffers.json").read_text())
    doc["body"]["f_min"] = 0.0
    (out / "buffers.json").write_text(json.dumps(doc))
    assert cli.main(["pipeline", "--config", tiny_cfg, "--out", str(out)]) == 4
    err = json.loads((out / "error.json").read_text())
    assert err["stage"] == "train" and err["exit_code"] == 4 and err["error"] == "IntegrityError"
    assert (out / "checkpoint.json").exists()  # partial artifacts preserved


def test_config_change_reruns_downstream_only(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    p = pl.run_pipeline(ExperimentConfig.from_dict(TINY), out)
    assert p.executed == ["netgen", "expert", "train", "eval"]
    changed = dict(TINY, eval={"horizon": 12, "checkpoints": [2, 12]})
    p = pl.run_pipeline(ExperimentConfig.from_dict(changed), out)
    # the config hash differs, so the manifest is rebuilt but unchanged stage keys still hit
    assert p.executed == ["eval"]


def test_numerical_failure_exit_3(tiny_cfg, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("non-finite sample")

    monkeypatch.setattr(pl, "fit", boom)
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--config", tiny_cfg, "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["stage"] == "train" and err["exit_code"] == 3


def test_standalone_subcommands(tiny_cfg, tmp_path, capsys):
    n, b, c, e = (str(tmp_path / x) for x in ("n.json", "b.json", "ck", "ev"))
    assert cli.main(["netgen", "--config", tiny_cfg, "--out", n]) == 0
    assert cli.main(["expert", "--config", tiny_cfg, "--data", n, "--out", b]) == 0
    assert cli.main(["train", "--config", tiny_cfg, "--data", n, "--buffers", b, "--out", c]) == 0
    assert cli.main(["eval", "--config", tiny_cfg, "--data", n, "--buffers", b, "--ckpt", c + "/checkpoint.json",
                     "--T", "6", "--horizons", "3,6", "--out", e]) == 0
    rows = json.loads((tmp_path / "ev" / "summary.json").read_text())["comparison"]
    assert {r["horizon"] for r in rows} == {3, 6}
    s = str(tmp_path / "slice.csv")
    assert cli.main(["slice", "--config", tiny_cfg, "--data", n, "--buffers", b, "--ckpt",
                     c + "/checkpoint.json", "--pairs", "0:1,2:3", "--samples", "5", "--out", s]) == 0
    lines = open(s).read().splitlines()
    assert len(lines) == 1 + 2 * 5 * 2
    # buffers from another network file are rejected
    n2 = str(tmp_path / "n2.json")
    assert cli.main(["netgen", "--config", tiny_cfg, "--seed", "9", "--out", n2]) == 0
    assert cli.main(["train", "--config", tiny_cfg, "--data", n2, "--buffers", b, "--out", c]) == 4
    assert cli.main(["slice", "--config", tiny_cfg, "--data", n, "--buffers", b, "--ckpt",
                     c + "/checkpoint.json", "--network", "99", "--out", s]) == 2


def test_jobs_do_not_change_results(tiny_cfg, tmp_path):
    a = pl.run_pipeline(ExperimentConfig.from_dict(TINY), tmp_path / "a", jobs=1)
    b = pl.run_pipeline(ExperimentConfig.from_dict(TINY), tmp_path / "b", jobs=2)
    assert pl.manifest_digest(a.out) == pl.manifest_digest(b.out)
