import pytest

from spinal.cli import run
from spinal.csvio import read_csv

TINY_POLICY = """
[policy]
ll_hidden = 6
hl_encoder = 4
hl_cells = 3
transfer_encoder = 5
transfer_cells = 4
control_dim = 3
ff_hidden = 6
K = 4
"""

TINY_LEARNER = """
[learner]
window = 5
envs_per_worker = 4
"""


def write_config(tmp_path, phase, env="", experiment="", name=None):
    text = (f'[experiment]\nphase = "{phase}"\nepisodes = 8\neval_every = 4\neval_episodes = 4\n'
            f"{experiment}\n[env]\nepisode_length = 10\n{env}\n{TINY_POLICY}{TINY_LEARNER}")
    path = tmp_path / (name or f"{phase}.toml")
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    d = tmp_path_factory.mktemp("pre")
    assert run(["pretrain", "--config", str(write_config(d, "pretrain")), "--seed", "0",
                "--out-dir", str(d / "out")]) == 0
    return d / "out" / "pretrain.ckpt"


def test_pretrain_same_seed_gives_identical_curves(tmp_path):
    cfg = write_config(tmp_path, "pretrain")
    for name in ("a", "b"):
        assert run(["pretrain", "--config", str(cfg), "--seed", "7",
                    "--out-dir", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "pretrain_curve.csv").read_bytes()
    assert a == (tmp_path / "b" / "pretrain_curve.csv").read_bytes()
    assert (tmp_path / "a" / "pretrain.ckpt").read_bytes() == \
        (tmp_path / "b" / "pretrain.ckpt").read_bytes()


@pytest.mark.parametrize("command", ["transfer", "analyze", "eval"])
def test_missing_checkpoint_flag_exits_one(tmp_path, capsys, command):
    cfg = write_config(tmp_path, "transfer", env='task = "sparse-seek"')
    assert run([command, "--config", str(cfg), "--out-dir", str(tmp_path)]) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_bad_config_exits_one_with_location(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('[experiment]\nphase = "pretrain"\n[learner]\nlr = -1\n')
    assert run(["pretrain", "--config", str(cfg)]) == 1
    assert f"{cfg}:4:1" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["launch"], ["pretrain"], ["pretrain", "--config"]])
def test_usage_errors_exit_one(argv):
    assert run(argv) == 1


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "pretrain" in capsys.readouterr().out


def test_missing_checkpoint_file_exits_one(tmp_path):
    cfg = write_config(tmp_path, "transfer", env='task = "sparse-seek"')
    assert run(["transfer", "--config", str(cfg), "--checkpoint", str(tmp_path / "x.ckpt")]) == 1


def test_runtime_failure_exits_two(tmp_path, capsys):
    cfg = write_config(tmp_path, "pretrain", env='task = "sparse-seek"')
    assert run(["pretrain", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2
    assert "runtime failure" in capsys.readouterr().err


def test_transfer_with_baseline(tmp_path, pretrained):
    cfg = write_config(tmp_path, "transfer", env='task = "sparse-seek"',
                       experiment='baselines = ["FF-scratch"]')
    assert run(["transfer", "--config", str(cfg), "--checkpoint", str(pretrained),
                "--seed", "1", "--out-dir", str(tmp_path / "t")]) == 0
    names = {p.name for p in (tmp_path / "t").iterdir()}
    assert {"transfer_curve.csv", "transfer.ckpt", "baseline_FF-scratch_curve.csv"} <= names


def test_init_ff_baseline_needs_ff_checkpoint(tmp_path, pretrained):
    cfg = write_config(tmp_path, "transfer", env='task = "sparse-seek"',
                       experiment='baselines = ["init-FF"]')
    assert run(["transfer", "--config", str(cfg), "--checkpoint", str(pretrained)]) == 1


def test_analyze_writes_one_csv_per_condition(tmp_path, pretrained):
    cfg = write_config(tmp_path, "analyze-noise", experiment=(
        "sigma_in = [0.0, 0.4]\nk_list = [10, 1]\naction_noise = [0.4]\n"
        "trajectory_length = 12\nn_trajectories = 2"))
    out = tmp_path / "an"
    assert run(["analyze", "--config", str(cfg), "--checkpoint", str(pretrained),
                "--out-dir", str(out)]) == 0
    traj = sorted(p.name for p in out.glob("traj_*.csv"))
    assert len(traj) == 2 * 2 + 1
    header, rows = read_csv(out / "analysis_summary.csv")
    assert len(rows) == 5 and "endpoint_spread" in header


def test_eval_exports_episodes(tmp_path, pretrained):
    cfg = write_config(tmp_path, "pretrain")
    out = tmp_path / "ev"
    assert run(["eval", "--config", str(cfg), "--checkpoint", str(pretrained), "--episodes", "3",
                "--out-dir", str(out)]) == 0
    _, rows = read_csv(out / "eval.csv")
    assert len(rows) == 3 and all(r[2] == "10" for r in rows)
    _, traj = read_csv(out / "eval_trajectories.csv")
    assert len(traj) == 30


def test_eval_rejects_task_mismatch(tmp_path, pretrained):
    cfg = write_config(tmp_path, "pretrain", env='task = "sparse-seek"')
    assert run(["eval", "--config", str(cfg), "--checkpoint", str(pretrained)]) == 1


def test_grid_command(tmp_path, capsys):
    cfg = write_config(tmp_path, "grid",
                       experiment="grid_seeds = 2\n[experiment.grid]\nalpha = [1e-4, 1e-3]")
    assert run(["grid", "--config", str(cfg), "--out-dir", str(tmp_path / "g")]) == 0
    _, rows = read_csv(tmp_path / "g" / "grid_results.csv")
    assert len(rows) == 4
    assert capsys.readouterr().out.count("cell ") == 2
