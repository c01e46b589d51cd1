import os
import subprocess
import sys

import pytest

from evolvecast.cli import build_parser, load_run_config
from evolvecast.errors import ConfigError

from csvtools import csv_files, without_timing

SCENARIO = """[scenario]
periods = 2
nodes = 10
steps = 160
steps_per_day = 32
features = 2
seed = 5
"""

RUN = """[model]
stacks = 1
blocks = 1
heads = 2
cheb_order = 2
in_features = 2
spatial_channels = 4
attention_channels = 4
temporal_filters = 3

[train]
max_epochs = 2
patience = 2
batch_size = 16

[continual]
fisher_samples = 4
steps_per_day = 32
"""


def cli(*args, check=True):
    env = dict(os.environ, EVOLVECAST_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "evolvecast.cli", *map(str, args)],
                          capture_output=True, text=True, env=env)
    if check and proc.returncode != 0:
        raise AssertionError(f"exit {proc.returncode}: {proc.stderr}")
    return proc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scenario.toml").write_text(SCENARIO)
    (root / "run.toml").write_text(RUN)
    return root


def assert_same_csvs(a, b):
    files = csv_files(a)
    assert files and files == csv_files(b)
    for rel in files:
        assert without_timing(a / rel) == without_timing(b / rel), rel


def test_generate_is_deterministic(workspace):
    for name in ("g1", "g2"):
        cli("generate", "--scenario", workspace / "scenario.toml", "--out", workspace / name, "--seed", 5)
    assert_same_csvs(workspace / "g1", workspace / "g2")
    assert (workspace / "g1" / "period_2" / "observations.csv").exists()
    assert (workspace / "g1" / "planted_shifts.csv").exists()


@pytest.mark.parametrize("scenario", ["full", "continual"])
def test_train_is_deterministic(workspace, scenario):
    data = workspace / "data"
    if not data.exists():
        cli("generate", "--scenario", workspace / "scenario.toml", "--out", data)
    outs = [workspace / f"{scenario}_{i}" for i in (1, 2)]
    for out in outs:
        cli("train", "--data", data, "--config", workspace / "run.toml", "--scenario", scenario,
            "--out", out, "--seed", 3)
    assert_same_csvs(*outs)
    for k in (1, 2):
        a = (outs[0] / f"period_{k}" / "checkpoint.txt").read_bytes()
        assert a == (outs[1] / f"period_{k}" / "checkpoint.txt").read_bytes()
    report = (outs[0] / "report.csv").read_text().splitlines()
    assert report[0] == f"# scenario={scenario}"
    assert (outs[0] / "buffers.txt").exists() == (scenario == "continual")


def test_forecast_and_evaluate(workspace):
    data = workspace / "data"
    if not data.exists():
        cli("generate", "--scenario", workspace / "scenario.toml", "--out", data)
    run = workspace / "fc_run"
    cli("train", "--data", data, "--config", workspace / "run.toml", "--scenario", "full", "--out", run)
    ckpt = run / "period_2" / "checkpoint.txt"
    for name in ("f1", "f2"):
        cli("forecast", "--checkpoint", ckpt, "--data", data, "--period", 2, "--out", workspace / name)
    assert_same_csvs(workspace / "f1", workspace / "f2")
    stdout = cli("forecast", "--checkpoint", ckpt, "--data", data, "--period", 2).stdout
    assert stdout.replace("\r\n", "\n") == (workspace / "f1" / "predictions.csv").read_text()

    for name in ("e1.csv", "e2.csv"):
        cli("evaluate", "--pred", workspace / "f1" / "predictions.csv", "--truth", workspace / "f1" / "truth.csv",
            "--period", 2, "--out", workspace / name)
    assert without_timing(workspace / "e1.csv") == without_timing(workspace / "e2.csv")
    # the CLI report matches the training report's full-graph rows for that period
    ev = [line.split(",")[:7] for line in (workspace / "e1.csv").read_text().splitlines()[2:]]
    tr = [line.split(",")[:7] for line in (run / "report.csv").read_text().splitlines()[2:]
          if line.startswith("2,all,")]
    assert ev == tr


def test_error_exit_codes(workspace):
    proc = cli("train", "--data", workspace / "nowhere", "--out", workspace / "x", check=False)
    assert proc.returncode == 2
    assert "evolvecast [data_io]" in proc.stderr
    bad = workspace / "bad.toml"
    bad.write_text("[train]\nepochs = 3\n")
    proc = cli("train", "--data", workspace / "nowhere", "--config", bad, "--out", workspace / "x", check=False)
    assert proc.returncode == 2 and "[config]" in proc.stderr
    proc = cli("forecast", "--checkpoint", workspace / "none.txt", "--data", workspace, "--period", 1, check=False)
    assert proc.returncode == 2 and "[tensor_autodiff]" in proc.stderr
    proc = cli("generate", "--out", workspace / "x", check=False)
    assert proc.returncode == 2 and "--scenario" in proc.stderr


def test_parser_and_config(tmp_path):
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert args.scenario == "continual" and args.seed is None
    p = tmp_path / "c.toml"
    p.write_text("[extra]\n")
    with pytest.raises(ConfigError):
        load_run_config(p)
    p.write_text(RUN)
    model, train, cont = load_run_config(p)
    assert model.spatial_channels == 4 and train.max_epochs == 2 and cont.fisher_samples == 4
