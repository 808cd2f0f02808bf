import json
import os

import numpy as np
import pytest

from lstmpool import cli
from lstmpool import experiments as E
from lstmpool.data import make_synthetic_cifar
from lstmpool.report import fmt, read_csv, write_csv


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    make_synthetic_cifar(str(root), n_train=400, n_test=120, seed=0)
    return str(root)


def tiny_classify_cfg(root, **over):
    cfg = {"kind": "classify", "seed": 1, "network": "conv4",
           "iterations": 6, "eval_every": 3,
           "data": {"root": root, "train_subset": 200, "test_subset": 60}}
    E._merge(cfg, over)
    return cfg


def tiny_approx_cfg(**over):
    cfg = {"kind": "approx", "seed": 0, "length": 4,
           "epochs": 2, "batches_per_epoch": 25}
    cfg.update(over)
    return cfg


def test_resolve_config_merges_defaults():
    cfg = E.resolve_config({"kind": "approx", "length": 16})
    assert cfg["length"] == 16
    assert cfg["lr0"] == 0.1
    assert cfg["batch"] == 128


def test_resolve_config_rejects_unknown_kind():
    with pytest.raises(E.ConfigError):
        E.resolve_config({"kind": "mystery"})


def test_resolve_config_requires_data_root(monkeypatch):
    monkeypatch.delenv(E.DATA_ROOT_ENV, raising=False)
    with pytest.raises(E.ConfigError):
        E.resolve_config({"kind": "classify"})


def test_env_var_provides_data_root(monkeypatch, data_root):
    monkeypatch.setenv(E.DATA_ROOT_ENV, data_root)
    cfg = E.resolve_config({"kind": "classify"})
    assert cfg["data"]["root"] == data_root


def test_apply_overrides_dotted_paths():
    cfg = {"kind": "classify", "pool": {"kind": "max"}}
    E.apply_overrides(cfg, ["pool.kind=lstm", "iterations=50",
                            "data.augment=false", "network=conv4"])
    assert cfg["pool"]["kind"] == "lstm"
    assert cfg["iterations"] == 50
    assert cfg["data"]["augment"] is False
    with pytest.raises(E.ConfigError):
        E.apply_overrides(cfg, ["no-equals-sign"])


def test_config_hash_stable_under_key_order():
    a = E.config_hash({"x": 1, "y": {"a": 2, "b": 3}})
    b = E.config_hash({"y": {"b": 3, "a": 2}, "x": 1})
    assert a == b
    assert a != E.config_hash({"x": 2, "y": {"a": 2, "b": 3}})


def test_run_approx_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    summary = E.run_approx(tiny_approx_cfg(), str(out), log=lambda *a: None)
    for name in ("resolved_config.json", "metrics.csv", "timing.csv",
                 "summary.json", "unit_params.json", "mae_table.csv",
                 "metrics.png"):
        assert (out / name).exists(), name
    assert set(summary["final_mae"]) == {"T1", "T2", "T3"}
    header, rows = read_csv(str(out / "metrics.csv"))
    assert header == ["iteration", "epoch", "train_loss", "val_metric", "lr"]
    iters = [int(r[0]) for r in rows]
    assert iters == sorted(iters) and len(set(iters)) == len(iters)


def test_run_approx_reuses_completed_run(tmp_path):
    out = tmp_path / "run"
    first = E.run_approx(tiny_approx_cfg(), str(out), log=lambda *a: None)
    stamp = os.path.getmtime(out / "metrics.csv")
    again = E.run_approx(tiny_approx_cfg(), str(out), log=lambda *a: None)
    assert again == first
    assert os.path.getmtime(out / "metrics.csv") == stamp     # untouched
    changed = E.run_approx(tiny_approx_cfg(seed=5), str(out), log=lambda *a: None)
    assert changed != first                                    # hash mismatch retrains


def test_run_approx_metrics_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    E.run_approx(tiny_approx_cfg(), str(out1), log=lambda *a: None)
    E.run_approx(tiny_approx_cfg(), str(out2), log=lambda *a: None)
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out1 / "mae_table.csv").read_bytes() == (out2 / "mae_table.csv").read_bytes()


def test_run_classify_writes_artifacts(tmp_path, data_root):
    out = tmp_path / "run"
    summary = E.run_classify(tiny_classify_cfg(data_root), str(out),
                             log=lambda *a: None)
    for name in ("resolved_config.json", "metrics.csv", "timing.csv",
                 "summary.json", "checkpoint.bin", "metrics.png"):
        assert (out / name).exists(), name
    assert 0.0 <= summary["test_accuracy"] <= 1.0
    assert summary["test_error_pct"] == pytest.approx(
        100 * (1 - summary["test_accuracy"]))


def test_run_classify_metrics_byte_identical(tmp_path, data_root):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    cfg = tiny_classify_cfg(data_root, pool={"kind": "lstm"})
    E.run_classify(cfg, str(out1), log=lambda *a: None)
    E.run_classify(cfg, str(out2), log=lambda *a: None)
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_snapshot(tmp_path, data_root):
    cfg = tiny_classify_cfg(data_root, pool={"kind": "lstm"})
    cfg["lr0"] = 1e12   # guaranteed blow-up
    cfg["clip_norm"] = None
    with pytest.raises(E.DivergenceError) as e:
        E.run_classify(cfg, str(tmp_path / "run"), log=lambda *a: None)
    snap = e.value.snapshot
    assert snap and all(len(unit) == 12 for unit in snap.values())


def test_analyze_response_standalone_unit(tmp_path):
    # exact-average parameterization: correlation with avg oracle is 1
    big = 50.0
    params = {"w_i": 0.0, "r_i": 0.0, "b_i": big,
              "w_f": 0.0, "r_f": 0.0, "b_f": big,
              "w_o": 0.0, "r_o": 0.0, "b_o": big,
              "w_g": 1.0 / 9.0, "r_g": 0.0, "b_g": 0.0}
    summary = E.analyze_response({"params": params, "length": 9, "psi": "relu"},
                                 str(tmp_path), n=500, seed=0, log=lambda *a: None)
    assert summary["correlation"]["unit"] > 0.999


def test_cli_exit_codes(tmp_path, data_root, capsys):
    rc = cli.main(["classify", "--out", str(tmp_path / "x"),
                   "--override", "kind=bogus"])
    assert rc == 2
    rc = cli.main(["classify", "--out", str(tmp_path / "y"),
                   "--override", f"data.root={tmp_path / 'nowhere'}"])
    assert rc == 3


def test_cli_approx_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["approx", "--out", str(out), "--seed", "0",
                   "--override", "length=4", "--override", "epochs=1",
                   "--override", "batches_per_epoch=10"])
    assert rc == 0
    doc = json.loads((out / "summary.json").read_text())
    assert doc["kind"] == "approx"


def test_csv_schema_and_float_format(tmp_path):
    assert fmt(0.1) == "0.1"
    assert fmt(1.0 / 3.0) == "0.333333333"
    assert fmt(3) == "3"
    path = tmp_path / "t.csv"
    write_csv(str(path), ["a", "b"], [[1, 2.5]], schema="demo")
    text = path.read_text().splitlines()
    assert text[0].startswith("#") and "demo" in text[0]
    assert read_csv(str(path)) == (["a", "b"], [["1", "2.5"]])
