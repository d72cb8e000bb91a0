import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from infodesign import cli
from infodesign import experiments as E
from infodesign.config import ConfigError, config_hash, normalize, parse_config, schema, task_defaults, to_dict
from infodesign.designopt import RunRecord


def smoke_boed(task="gauss-oracle", **extra):
    cfg = {"task": task, "rounds": 1, "pool_size": 32, "name": "smoke",
           "train": {"steps": 6, "batch_size": 4, "n_contrastive": 3, "sigma_start": 1.0, "sigma_end": 0.1},
           "flow": {"hidden": 4, "depth": 1, "n_bijectors": 1},
           "mcmc": {"chains": 2, "warmup": 50, "draws": 100}}
    cfg.update(extra)
    return cfg


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


# -- config ------------------------------------------------------------------


def test_table_defaults_per_task():
    lin = parse_config({"task": "linear"})
    assert (lin.train.batch_size, lin.train.n_contrastive, lin.flow.hidden, lin.flow.depth) == (10, 50, 128, 4)
    assert lin.train.clip is None and lin.train.lr_anneal is None
    sir = parse_config({"task": "sir"})
    assert (sir.train.batch_size, sir.train.n_contrastive, sir.train.clip, sir.train.final_lr) == (256, 255, 5.0, 1e-4)
    assert sir.truth == [0.7399, 0.0924]


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        parse_config({"task": "linear", "bogus": 1})
    with pytest.raises(ConfigError):
        parse_config({"task": "linear", "train": {"stepz": 3}})
    with pytest.raises(ConfigError):
        parse_config({"task": "nope"})


def test_value_checks():
    with pytest.raises(ConfigError):
        parse_config({"task": "linear", "rounds": 0})
    with pytest.raises(ConfigError):
        parse_config({"task": "linear", "train": {"sigma_start": -1.0}})


@given(st.sampled_from(["linear", "sir", "two-moons", "gauss-oracle"]), st.integers(1, 50), st.floats(0, 2),
       st.integers(0, 2**32))
def test_schema_round_trip(task, steps, lam, seed):
    raw = {"task": task, "seed": seed, "train": {"steps": steps, "lam": lam}}
    cfg = parse_config(raw)
    assert to_dict(parse_config(to_dict(cfg))) == normalize(raw)
    assert config_hash(parse_config(to_dict(cfg))) == config_hash(cfg)


def test_schema_is_json_schema():
    s = schema()
    assert s["additionalProperties"] is False and "train" in s["properties"]
    assert set(task_defaults("sir")) == {"train", "flow", "truth"}


# -- commands ----------------------------------------------------------------


def test_dry_run_echoes_config(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("INFODESIGN_OUT", str(tmp_path / "out"))
    assert cli.main(["boed", "--config", str(write(tmp_path, smoke_boed())), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert '"task": "gauss-oracle"' in out and "smoke sample" in out
    assert not (tmp_path / "out").exists()


def test_config_error_exit_code(tmp_path):
    assert cli.main(["boed", "--config", str(write(tmp_path, {"task": "sir", "oops": 1}))]) == 2
    assert cli.main(["boed", "--config", str(tmp_path / "missing.json")]) == 2


def test_wrong_task_for_command_is_config_error(tmp_path):
    assert cli.main(["mi-sweep", "--config", str(write(tmp_path, {"task": "sir"}))]) == 2
    assert cli.main(["boed", "--config", str(write(tmp_path, {"task": "two-moons"}))]) == 2


def test_mi_sweep_smoke(tmp_path, monkeypatch):
    monkeypatch.setenv("INFODESIGN_OUT", str(tmp_path / "out"))
    cfg = {"task": "two-moons", "name": "sweep", "train": {"steps": 1},
           "flow": {"hidden": 4, "depth": 1, "n_bijectors": 1},
           "sweep": {"L": [1], "lam": [0.0], "validation_size": 16, "eval_every": 1}}
    assert cli.main(["mi-sweep", "--config", str(write(tmp_path, cfg))]) == 0
    run = tmp_path / "out" / "sweep" / "seed0"
    cells = [p for p in run.iterdir() if p.is_dir()]
    assert len(cells) == 1
    assert sorted(p.name for p in cells[0].glob("*.csv")) == ["metrics.csv", "validation.csv"]
    assert json.loads((run / "run_manifest.json").read_text())["cells"][0]["L"] == 1


@pytest.fixture
def boed_run(tmp_path, monkeypatch):
    monkeypatch.setenv("INFODESIGN_OUT", str(tmp_path / "out"))
    cfg_path = write(tmp_path, smoke_boed())
    assert cli.main(["boed", "--config", str(cfg_path)]) == 0
    return tmp_path / "out" / "smoke" / "seed0"


def test_boed_writes_artifacts(boed_run):
    names = {p.name for p in boed_run.iterdir()}
    assert {"metrics.csv", "timing.csv", "run_manifest.json", "posterior_samples.csv"} <= names
    manifest = json.loads((boed_run / "run_manifest.json").read_text())
    for r in manifest["rounds"]:
        assert (boed_run / r["checkpoint_file"]).exists()
    rec = RunRecord.read_csv(boed_run / "metrics.csv")
    assert manifest["eig_star"][0] == rec.column("eig").max()
    summary = json.loads((boed_run.parent / "summary.json").read_text())
    assert summary["table"][0]["lc2st"].startswith("n/a")


def test_rerun_from_manifest_is_bit_identical(boed_run, tmp_path, monkeypatch):
    before = (boed_run / "metrics.csv").read_bytes()
    monkeypatch.setenv("INFODESIGN_OUT", str(tmp_path / "again"))
    assert cli.main(["boed", "--config", str(boed_run / "run_manifest.json")]) == 0
    after = (tmp_path / "again" / "smoke" / "seed0" / "metrics.csv").read_bytes()
    assert before == after


def test_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("INFODESIGN_OUT", str(tmp_path / "out"))
    assert cli.main(["boed", "--config", str(write(tmp_path, smoke_boed())), "--seed", "7"]) == 0
    assert (tmp_path / "out" / "smoke" / "seed7" / "metrics.csv").exists()


def test_diagnose_outputs(boed_run):
    assert cli.main(["diagnose", "--config", str(boed_run)]) == 0
    d = boed_run / "diagnostics"
    assert {"coverage.csv", "rhat.csv", "eig_vs_step.csv"} <= {p.name for p in d.iterdir()}


def test_diagnose_missing_posterior(boed_run, capsys):
    (boed_run / "posterior_samples.csv").unlink()
    assert cli.main(["diagnose", "--config", str(boed_run)]) == 3
    assert "missing posterior_samples.csv" in capsys.readouterr().err


def test_diagnose_pair_writes_comparison(tmp_path, monkeypatch):
    monkeypatch.setenv("INFODESIGN_OUT", str(tmp_path / "out"))
    a = smoke_boed(name="wide")
    b = smoke_boed(name="point")
    b["train"] = dict(b["train"], sigma_start=0.0, sigma_end=0.0)
    for c in (a, b):
        assert cli.main(["boed", "--config", str(write(tmp_path, c, c["name"] + ".json"))]) == 0
    runs = [str(tmp_path / "out" / n / "seed0") for n in ("wide", "point")]
    assert cli.main(["diagnose", "--config", *runs, "--out", str(tmp_path / "cmp")]) == 0
    lines = (tmp_path / "cmp" / "comparison_eig.csv").read_text().splitlines()
    assert lines[0].startswith("row,eig_0,eig_1") and len(lines) == 7


def test_lambda_lowers_oracle_eig_on_most_seeds():
    lower = []
    for s in range(5):
        vals = []
        for lam in (0.0, 0.5):
            r = E.gauss_fixed_design(seed=s, steps=200, L=31, lam=lam, eval_batch=256)
            vals.append(float(np.mean(r["record"].column("eig")[-50:])))
        lower.append(vals[1] <= vals[0])
    assert sum(lower) >= 4
