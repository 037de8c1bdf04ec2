import json
import os

import pytest

from rcmlab.cli import RunConfig, coalesce, derive_seed, main

BLOB = {"family": "poisson-blob", "d": 2}


def _config(tmp_path, name="cfg.json", **extra):
    raw = {"kernel": BLOB, "box": {"L": 6.0}, "seed": 7, "lambda": 1.0, "replicates": 40, "bins": {"batches": 4}}
    raw.update(extra)
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_config_round_trip_and_hash():
    cfg = RunConfig.loads(json.dumps({"kernel": BLOB, "box": {"L": 6.0}, "seed": 3, "lambda": 0.5}))
    again = RunConfig.loads(cfg.dumps())
    assert again.to_dict() == cfg.to_dict()
    shifted = RunConfig.loads(cfg.dumps())
    shifted.replica_start, shifted.out, shifted.threads = 100, "elsewhere", 4
    assert shifted.config_hash() == cfg.config_hash()
    shifted.seed = 4
    assert shifted.config_hash() != cfg.config_hash()


def test_seed_derivation_and_range_coalescing():
    assert derive_seed(1, "pi0") == derive_seed(1, "pi0") != derive_seed(1, "other")
    assert coalesce([(10, 20), (0, 10), (30, 40)]) == [[0, 20], [30, 40]]


def test_parse_errors_exit_2_without_artifacts(tmp_path):
    out = tmp_path / "out"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["tau-field", "--config", str(bad), "--out", str(out)]) == 2
    unknown = _config(tmp_path, "unknown.json", colour="red")
    assert main(["tau-field", "--config", unknown, "--out", str(out)]) == 2
    assert main(["no-such-command"]) == 2
    assert not out.exists()


def test_precondition_failure_exit_3_writes_error(tmp_path):
    out = tmp_path / "out"
    cfg = _config(tmp_path, box={"L": 0.5})
    assert main(["tau-field", "--config", cfg, "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["exit_code"] == 3
    assert json.loads((out / "manifest.json").read_text())["status"] == "failed"


def test_tau_field_at_zero_intensity_matches_phi(tmp_path):
    cfg = _config(tmp_path, **{"lambda": 0.0, "replicates": 400})
    assert main(["tau-field", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    check = json.loads((tmp_path / "o" / "tau_check.json").read_text())["phi_check"]
    assert check["matches"]


def test_same_seed_same_bytes_any_thread_count(tmp_path):
    cfg = _config(tmp_path)
    assert main(["tau-field", "--config", cfg, "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(["tau-field", "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    for name in ("tau_field.csv", "tau_field_batches.csv", "tau_field.json"):
        assert _read(tmp_path / "a" / name) == _read(tmp_path / "b" / name)
    echoed = [RunConfig.loads((tmp_path / n / "config.json").read_text()) for n in ("a", "b")]
    assert echoed[0].config_hash() == echoed[1].config_hash()
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["threads"] == 3 and manifest["exit_code"] == 0


def test_split_runs_merge_to_the_full_run(tmp_path):
    full = _config(tmp_path, "full.json")
    first = _config(tmp_path, "first.json", replicates=25)
    second = _config(tmp_path, "second.json", replicates=15, replica_start=25)
    for cfg, name in ((full, "full"), (first, "a"), (second, "b")):
        assert main(["tau-field", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    a, b = str(tmp_path / "a" / "tau_field.json"), str(tmp_path / "b" / "tau_field.json")
    assert main(["merge", a, b, "--out", str(tmp_path / "ab")]) == 0
    assert main(["merge", b, a, "--out", str(tmp_path / "ba")]) == 0
    for name in ("tau_field.csv", "tau_field_batches.csv", "tau_field.json"):
        ref = _read(tmp_path / "full" / name)
        assert _read(tmp_path / "ab" / name) == ref
        assert _read(tmp_path / "ba" / name) == ref
    assert main(["merge", a, a, "--out", str(tmp_path / "aa")]) == 3


def test_merge_refuses_different_configs(tmp_path):
    one = _config(tmp_path, "one.json")
    two = _config(tmp_path, "two.json", seed=8, replica_start=40)
    assert main(["tau-field", "--config", one, "--out", str(tmp_path / "a")]) == 0
    assert main(["tau-field", "--config", two, "--out", str(tmp_path / "b")]) == 0
    files = [str(tmp_path / n / "tau_field.json") for n in ("a", "b")]
    assert main(["merge", *files, "--out", str(tmp_path / "m")]) == 3


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RCMLAB_THREADS", "2")
    cfg = _config(tmp_path, replicates=10)
    assert main(["tau-field", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["threads"] == 2
    monkeypatch.setenv("RCMLAB_THREADS", "zero")
    assert main(["tau-field", "--config", cfg, "--out", str(tmp_path / "p")]) == 2


def test_selftest_without_config(tmp_path):
    out = tmp_path / "self"
    assert main(["selftest", "--out", str(out)]) == 0
    rep = json.loads((out / "selftest.json").read_text())
    assert rep["passed"]
    assert rep["double_connection"]["mismatches"] == 0


@pytest.mark.parametrize("command", ["spectrum", "assumptions", "sample"])
def test_light_subcommands_succeed(tmp_path, command):
    cfg = _config(tmp_path, kernel={"family": "gaussian", "d": 2}, box={"L": 16.0})
    out = tmp_path / command
    assert main([command, "--config", cfg, "--out", str(out)]) == 0
    assert os.path.exists(out / "manifest.json")
