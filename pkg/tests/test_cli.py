import csv
import json
import textwrap

import pytest

from icl_lab import cli

SMOKE = """\
experiment: smoke
train:
  variant: gdpp
  layers: 1
  d: 3
  n: 8
  noise: {kind: fixed, sigma: 0.0}
  batch_size: 32
  iterations: 200
  learning_rate: 0.01
  seeds: [0, 1]
eval:
  seed: 100
  size: 500
  select_seed: 200
  select_size: 300
  tune_seed: 300
  tune_size: 500
baselines: [oracle, ada_rr, const_rr]
table:
  models:
    - {variant: gdpp, layers: 1}
profile:
  points: 4
  n_eval: 200
  seed: 400
  models:
    - {variant: gdpp, layers: 1}
theory:
  reconstruction_models: 12
  max_layers: 4
  gdpp_tasks: 5
  probe_trials: 5
  adaptive_trials: 3
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text(SMOKE)
    return path


def run(config, command, out, *extra):
    return cli.main([command, "--config", str(config), "--out", str(out), *extra])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_table_profile_roundtrip(config, tmp_path):
    out = tmp_path / "out"
    assert run(config, "train", out) == 0
    run_dir = out / "smoke" / "train" / "gdpp-L1-fixed0"
    best = json.loads((run_dir / "best.json").read_text())
    assert best["best_seed"] in (0, 1) and (run_dir / best["checkpoint"]).exists()
    assert {"config_hash", "revision", "seed"} <= set(best)
    log_rows = read_csv(run_dir / "seed0" / "train_log.csv")
    assert log_rows and log_rows[0]["config_hash"] == best["config_hash"]

    assert run(config, "table", out) == 0
    rows = read_csv(out / "smoke" / "table.csv")
    names = [r["predictor"] for r in rows]
    assert names == ["Oracle", "AdaRR", "ConstRR", "gdpp-L1"]
    assert float(rows[0]["adjusted_loss"]) == 0.0
    assert all(r["revision"] and r["seed"] == "100" for r in rows)
    base = read_csv(out / "smoke" / "baselines.csv")
    assert json.loads(base[2]["tuned_params_json"]).keys() == {"sigma2"}
    assert "| predictor |" in (out / "smoke" / "table.md").read_text()

    assert run(config, "profile", out) == 0
    prof = read_csv(out / "smoke" / "profile-fixed0.csv")
    assert len(prof) == 4 * 4
    flags = {float(r["sigma"]): r["in_distribution"] for r in prof if r["predictor_id"] == "Oracle"}
    assert flags[0.0] == "1" and flags[1.0] == "0"
    assert all(float(r["adjusted_loss"]) == 0 for r in prof if r["predictor_id"] == "Oracle")


def test_train_deterministic(config, tmp_path):
    assert run(config, "train", tmp_path / "a") == 0
    assert run(config, "train", tmp_path / "b") == 0
    rel = "smoke/train/gdpp-L1-fixed0/best.json"
    assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_table_bit_identical(config, tmp_path):
    out = tmp_path / "out"
    run(config, "train", out)
    run(config, "table", out)
    first = (out / "smoke" / "table.csv").read_bytes()
    run(config, "table", out)
    assert (out / "smoke" / "table.csv").read_bytes() == first


def test_missing_artifact(config, tmp_path, capsys):
    assert run(config, "table", tmp_path / "empty") == 1
    assert "gdpp-L1-fixed0" in capsys.readouterr().err


def test_seed_override(config, tmp_path):
    out = tmp_path / "out"
    assert run(config, "train", out, "--seed", "7") == 0
    best = json.loads((out / "smoke/train/gdpp-L1-fixed0/best.json").read_text())
    assert best["best_seed"] == 7 and len(best["results"]) == 1


def test_env_output_root(config, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    assert cli.main(["theory", "--config", str(config)]) == 0
    assert (tmp_path / "env" / "smoke" / "theory.csv").exists()


def test_theory_failure_injection(config, tmp_path, monkeypatch, capsys):
    import icl_lab.analysis as an
    real = an.implicit_step

    def broken(state, blk):
        out = real(state, blk)
        out.M = out.M * (1 + 1e-6)
        return out

    monkeypatch.setattr(an, "implicit_step", broken)
    assert run(config, "theory", tmp_path) == 1
    assert "FAIL  implicit representation" in capsys.readouterr().out


def test_unknown_key_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(SMOKE.replace("  batch_size: 32", "  batchsize: 32"))
    assert cli.main(["train", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "batchsize" in err and "line 8" in err


def test_unknown_noise_key(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(SMOKE.replace("{kind: fixed, sigma: 0.0}", "{kind: fixed, sigmaa: 0.0}"))
    assert cli.main(["train", "--config", str(path)]) == 2
    assert "line 7" in capsys.readouterr().err


def test_invalid_values_rejected(tmp_path):
    for bad in ("  layers: 0", "  variant: rnn"):
        path = tmp_path / "bad.yaml"
        path.write_text(SMOKE.replace("  layers: 1\n  d: 3", bad + "\n  d: 3")
                        .replace("  variant: gdpp\n", "" if "variant" in bad else "  variant: gdpp\n"))
        assert cli.main(["train", "--config", str(path)]) == 2


def test_seed_roles_distinct(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(SMOKE.replace("select_seed: 200", "select_seed: 100"))
    assert cli.main(["table", "--config", str(path)]) == 2


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["fly", "--config", "x.yaml"]) == 2
    assert cli.main(["train"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2
