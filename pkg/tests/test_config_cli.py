import json

import pytest

from faasml.cli import main
from faasml.config import PRESETS, load_config_dict, load_config_file
from faasml.errors import ConfigError

MINIMAL = """
[job]
model = "lr"
workers = 2
algorithm = "ga_sgd"
mode = "simulate"
seed = 11
lr = 0.2
batch_size = 100
loss_threshold = 0.55
max_epochs = 20

[job.dataset]
kind = "synthetic"
n = 1500
d = 8
"""


def write_cfg(tmp_path, text=MINIMAL, name="job.toml") -> str:
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_load_minimal_config(tmp_path):
    loaded = load_config_file(write_cfg(tmp_path))
    assert loaded.job.workers == 2
    assert loaded.job.dataset.n == 1500
    assert loaded.costmodel.bandwidth_s3 == 65.0


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="job.frobnicate"):
        load_config_dict({"job": {"frobnicate": 1}})
    with pytest.raises(ConfigError, match=r"unknown section"):
        load_config_dict({"jobs": {}})
    with pytest.raises(ConfigError, match="costmodel.nope"):
        load_config_dict({"costmodel": {"nope": 2.0}})
    with pytest.raises(ConfigError, match="pricing"):
        load_config_dict({"pricing": {"wat": 1.0}})


def test_missing_preset_rejected():
    with pytest.raises(ConfigError, match="does not exist"):
        load_config_dict({"job": {"preset": "nonexistent"}})


def test_builtin_preset_values_applied():
    loaded = load_config_dict({"job": {"preset": "lr_higgs", "workers": 3}})
    assert loaded.job.batch_size == 10_000
    assert loaded.job.loss_threshold == 0.66
    assert loaded.job.workers == 3  # explicit key overrides the preset
    km = load_config_dict({"job": {"preset": "kmeans_higgs"}})
    assert km.job.k == 10 and km.job.loss_threshold == 0.15
    rcv = load_config_dict({"job": {"preset": "lr_rcv1"}})
    assert rcv.job.batch_size == 2000 and rcv.job.loss_threshold == 0.68


def test_user_preset_section():
    loaded = load_config_dict({
        "presets": {"mine": {"workers": 7, "lr": 0.3}},
        "job": {"preset": "mine"},
    })
    assert loaded.job.workers == 7
    assert loaded.job.lr == 0.3


def test_costmodel_tables_parsed():
    loaded = load_config_dict({
        "costmodel": {"startup_faas": {"10": 2.0, "100": 20.0},
                      "bandwidth_s3": 100.0}})
    assert loaded.costmodel.startup_faas == {10: 2.0, 100: 20.0}
    assert loaded.costmodel.bandwidth_s3 == 100.0


def test_invalid_workers_names_key():
    with pytest.raises(ConfigError, match="job.workers"):
        load_config_dict({"job": {"workers": 0}})


# ------------------------------------------------------------------------ CLI

def test_cli_train_minimal(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    code = main(["train", "--config", cfg, "--out-dir", str(out)])
    assert code == 0  # threshold 0.55 is reachable
    report = json.loads((out / "report.json").read_text())
    assert report["schema"] == "v1"
    assert report["converged"] is True
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,time_s,loss"
    assert len(trace) >= 2


def test_cli_train_nonconvergence_exit_2(tmp_path):
    text = MINIMAL.replace('loss_threshold = 0.55', 'loss_threshold = 0.0') \
                  .replace('max_epochs = 20', 'max_epochs = 2')
    cfg = write_cfg(tmp_path, text)
    code = main(["train", "--config", cfg, "--out-dir", str(tmp_path / "o2")])
    assert code == 2


def test_cli_train_bad_workers_exit_1(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code = main(["train", "--config", cfg, "--workers", "0",
                 "--out-dir", str(tmp_path / "o3")])
    assert code == 1
    assert "job.workers" in capsys.readouterr().err


def test_cli_train_deterministic_bytes(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["train", "--config", cfg, "--out-dir", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--out-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "trace.csv").read_bytes() == \
        (tmp_path / "b" / "trace.csv").read_bytes()
    assert (tmp_path / "a" / "report.json").read_bytes() == \
        (tmp_path / "b" / "report.json").read_bytes()


def test_cli_env_seed_override(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    main(["train", "--config", cfg, "--out-dir", str(tmp_path / "s1")])
    monkeypatch.setenv("FAASML_SEED", "99")
    main(["train", "--config", cfg, "--out-dir", str(tmp_path / "s2")])
    r1 = json.loads((tmp_path / "s1" / "report.json").read_text())
    r2 = json.loads((tmp_path / "s2" / "report.json").read_text())
    assert r1["seed"] == 11 and r2["seed"] == 99
    assert r1["final_model_sha256"] != r2["final_model_sha256"]


def test_cli_model_sweep_startup_columns(tmp_path, capsys):
    code = main(["model", "--sweep", "10"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("config,w,time_s,cost_usd,startup_s")
    rows = {ln.split(",")[0]: ln.split(",") for ln in lines[1:]}
    assert float(rows["faas_s3"][4]) == 1.2
    assert float(rows["iaas"][4]) == 132.0


def test_cli_model_scenario_rows(tmp_path, capsys):
    code = main(["model", "--scenario", "hybrid_fast_link"])
    assert code == 0
    out = capsys.readouterr().out
    assert "hybrid," in out
    code = main(["model", "--scenario", "bogus"])
    err = capsys.readouterr().err
    assert code == 1
    assert "baseline" in err and "hot_data" in err


def test_cli_model_out_file(tmp_path):
    target = tmp_path / "sweep.csv"
    code = main(["model", "--sweep", "1,10", "--out", str(target)])
    assert code == 0
    assert target.read_text().startswith("config,w,time_s")


def test_cli_estimate_zero_epochs(tmp_path, capsys):
    text = MINIMAL.replace("loss_threshold = 0.55", "loss_threshold = 0.7")
    cfg = write_cfg(tmp_path, text)  # ln 2 < 0.7 at initialization
    code = main(["estimate", "--config", cfg])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["R_sgd"] == 0 and out["R_admm"] == 0
    p = out["predicted_sgd"]
    # zero epochs: predicted time is startup plus loading only
    assert p["faas_s"] == pytest.approx(1.2 + 8000.0 / 65.0)


def test_cli_estimate_fields_present(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code = main(["estimate", "--config", cfg, "--sample-frac", "0.5"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    for key in ("R_sgd", "R_admm", "predicted_sgd", "predicted_admm"):
        assert key in out


def test_cli_estimate_missing_dataset(tmp_path, capsys):
    text = MINIMAL + '\n'
    text = text.replace('kind = "synthetic"', 'kind = "libsvm"')
    cfg = write_cfg(tmp_path, text)
    code = main(["estimate", "--config", cfg])
    assert code == 1
    assert "path" in capsys.readouterr().err


def test_presets_cover_reference_workloads():
    for name in ("lr_higgs", "svm_higgs", "kmeans_higgs", "lr_rcv1",
                 "svm_rcv1", "kmeans_rcv1", "lr_yfcc100m"):
        assert name in PRESETS
    assert PRESETS["svm_higgs"]["loss_threshold"] == 0.48
    assert PRESETS["kmeans_rcv1"]["loss_threshold"] == 0.01


def test_shipped_example_config_parses_and_runs():
    import pathlib
    root = pathlib.Path(__file__).resolve().parent.parent
    example = root / "configs" / "example.toml"
    loaded = load_config_file(example)
    assert loaded.job.workers == 4
    assert loaded.costmodel.dataset_mb == 8000.0
