import json
import subprocess
import sys

import pytest
import yaml

from cbsa.cli import EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_OK, main
from cbsa.config import ConfigError, RunConfig, load_config
from cbsa.runner import error_bars, load_dataset, materialize, read_metrics

SMALL_ENV = {
    "CBSA_DATA_N_TOTAL": "100",
    "CBSA_DATA_N_VAL": "40",
    "CBSA_DATA_P": "0.1",
    "CBSA_TRAIN_TOTAL_EPOCHS": "3",
    "CBSA_TRAIN_WARMUP_EPOCHS": "1",
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 5, "train": {"max_lr": 2e-3, "batch_size": 16}, "cat": {"rho": 0.8}}))
    return path


def test_defaults():
    cfg = load_config(environ={})
    assert cfg == RunConfig()
    assert cfg.train.batch_size == 8 and cfg.context.K == 3 and cfg.data.p == 0.05


def test_precedence_file_env_flag(cfg_file):
    cfg = load_config(cfg_file, environ={})
    assert (cfg.seed, cfg.train.max_lr, cfg.train.batch_size, cfg.cat.rho) == (5, 2e-3, 16, 0.8)
    env = {"CBSA_TRAIN_MAX_LR": "5e-4", "CBSA_SEED": "7"}
    cfg = load_config(cfg_file, environ=env)
    assert (cfg.seed, cfg.train.max_lr, cfg.train.batch_size) == (7, 5e-4, 16)
    cfg = load_config(cfg_file, environ=env, overrides={"seed": 9, "train.batch_size": 4})
    assert (cfg.seed, cfg.train.max_lr, cfg.train.batch_size) == (9, 5e-4, 4)


def test_unrelated_environment_is_ignored():
    assert load_config(environ={"HOME": "/x", "CBSAX": "1"}) == RunConfig()


@pytest.mark.parametrize(
    "text",
    ["train: {max_lrr: 1}", "bogus: 1", "train: 3", "train: {batch_size: 2.5}", "model: {class_specific: maybe}", "- 1"],
)
def test_bad_files(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path, environ={})


@pytest.mark.parametrize("env", [{"CBSA_TRAIN_NOPE": "1"}, {"CBSA_NOSECTION": "1"}, {"CBSA_TRAIN_MAX_LR": "fast"}])
def test_bad_environment(env):
    with pytest.raises(ConfigError):
        load_config(environ=env)


def test_round_trip_through_yaml(tmp_path, cfg_file):
    cfg = load_config(cfg_file, environ={})
    cfg.dump(tmp_path / "again.yaml")
    assert load_config(tmp_path / "again.yaml", environ={}) == cfg


def test_error_bars():
    eb = error_bars([1.0, 2.0, 3.0])
    assert eb["mean"] == 2.0 and eb["stderr"] == pytest.approx(1 / 3**0.5)
    lo, hi = eb["ci95"]
    assert hi - 2.0 == pytest.approx(4.302652729911275 / 3**0.5)
    assert error_bars([4.0])["stderr"] is None


def test_gen_data_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--out", str(a), "--seed", "2"], environ=SMALL_ENV) == EXIT_OK
    assert main(["gen-data", "--out", str(b), "--seed", "2"], environ=SMALL_ENV) == EXIT_OK
    for name in ("train.cbsf", "val.cbsf", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    loaded = load_dataset(a)
    mem = materialize(load_config(environ=SMALL_ENV, overrides={"seed": 2}), 2)
    assert loaded.data.features_l.tobytes() == mem.data.features_l.tobytes()
    assert loaded.data.labels_val.tobytes() == mem.data.labels_val.tobytes()


def test_partition_command(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["partition", "--out", str(out)], environ={"CBSA_CONTEXT_K": "1"}) == EXIT_OK
    part = json.loads((out / "partition.json").read_text())
    assert part["K"] == 1 and set(part["assignment"]) == {0}
    first = (out / "partition.json").read_bytes()
    assert main(["partition", "--out", str(out)], environ={"CBSA_CONTEXT_K": "1"}) == EXIT_OK
    assert (out / "partition.json").read_bytes() == first


def test_partition_k_above_c_is_config_error(tmp_path):
    assert main(["partition", "--out", str(tmp_path)], environ={"CBSA_CONTEXT_K": "13"}) == EXIT_CONFIG


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {nope: 1}")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)], environ={}) == EXIT_CONFIG
    assert main(["gen-data", "--out", str(tmp_path)], environ={"CBSA_DATA_POSITIVES_RANGE": "[1, 9]"}) == EXIT_CONFIG


def test_missing_data_dir_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")], environ={}) == EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_exits_3(tmp_path):
    env = {**SMALL_ENV, "CBSA_TRAIN_MAX_LR": "1e200"}
    assert main(["train", "--out", str(tmp_path)], environ=env) == EXIT_NONFINITE
    assert json.loads((tmp_path / "final.json").read_text())["status"] == "non-finite loss"
    assert (tmp_path / "metrics.csv").exists()


def test_train_then_evaluate(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--out", str(data)], environ=SMALL_ENV) == EXIT_OK
    assert main(["train", "--data", str(data), "--out", str(run)], environ=SMALL_ENV) == EXIT_OK
    for name in ("metrics.csv", "thresholds.csv", "model.npz", "config.yaml", "partition.json", "final.json"):
        assert (run / name).exists()
    final = json.loads((run / "final.json").read_text())
    assert main(["evaluate", "--out", str(run)], environ={}) == EXIT_OK
    ev = json.loads((run / "eval.json").read_text())
    assert ev["map_val"] == final["map_val"] and ev["context_accuracy"] == final["context_accuracy"]
    assert len(read_metrics(run / "metrics.csv")) == 3


def test_multi_seed_and_ablate(tmp_path):
    assert main(["train", "--seeds", "1,2", "--ablate", "tp", "--out", str(tmp_path / "t")], environ=SMALL_ENV) == EXIT_OK
    final = json.loads((tmp_path / "t" / "final.json").read_text())
    assert final["seeds"] == [1, 2] and final["summary"]["map_val"]["n"] == 2
    assert (tmp_path / "t" / "seed_2" / "metrics.csv").exists()
    assert main(["ablate", "--modes", "none,tp", "--seeds", "1", "--out", str(tmp_path / "a")], environ=SMALL_ENV) == EXIT_OK
    result = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert result["modes"] == ["none", "tp"]
    assert (tmp_path / "a" / "ablation.csv").read_text().count("\n") == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cbsa.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
