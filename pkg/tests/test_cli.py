import os

import numpy as np
import pytest

from diraclift import dataio
from diraclift.cli import run


OSC_CFG = """
[system]
kind = damped_oscillator
mass = 1.0
stiffness = 1.0
damping = 0.4
[control]
kind = piecewise
amplitude = 0.8
hold = 0.2
[integrator]
dt = 0.01
n_steps = 80
substeps = 5
[dataset]
n_trajectories = 4
seed = 3
init_q_range = 1.0
init_p_range = 1.0
[psn]
hidden_size = 6
context_len = 6
[sympnet]
modules = 4
width = 8
[train]
learning_rate = 0.003
batch_size = 64
epochs = 3
seed = 1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(OSC_CFG)
    return root, str(cfg_path)


def test_generate_and_determinism(workdir):
    root, cfg = workdir
    out1, out2 = root / "gen1", root / "gen2"
    assert run(["generate", "--config", cfg, "--out", str(out1), "--quiet"]) == 0
    assert run(["generate", "--config", cfg, "--out", str(out2), "--quiet"]) == 0
    f1 = (out1 / "trajectories.csv").read_bytes()
    f2 = (out2 / "trajectories.csv").read_bytes()
    assert f1 == f2
    trajs = dataio.load_trajectories(out1 / "trajectories.csv")
    assert len(trajs) == 4
    assert trajs[0].dt == 0.01


def test_generate_seed_override_changes_output(workdir):
    root, cfg = workdir
    out = root / "gen_seeded"
    assert run(["generate", "--config", cfg, "--out", str(out), "--seed", "99",
                "--quiet"]) == 0
    base = (root / "gen1" / "trajectories.csv").read_bytes()
    assert (out / "trajectories.csv").read_bytes() != base


def test_generate_numerical_blowup_exits_3(tmp_path):
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text(OSC_CFG.replace("stiffness = 1.0", "stiffness = -80.0")
                        .replace("n_steps = 80", "n_steps = 2000")
                        .replace("dt = 0.01", "dt = 0.5"))
    assert run(["generate", "--config", str(cfg_path),
                "--out", str(tmp_path / "boom"), "--quiet"]) == 3


def test_lift_then_validate(workdir, capsys):
    root, cfg = workdir
    lifted_path = root / "lifted.csv"
    code = run(["lift", "--config", cfg, "--traj",
                str(root / "gen1" / "trajectories.csv"),
                "--out", str(lifted_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "gauge residual" in out
    lifted = dataio.load_trajectories(lifted_path)
    assert len(lifted) == 4
    # lift is deterministic
    lifted2_path = root / "lifted2.csv"
    run(["lift", "--config", cfg, "--traj",
         str(root / "gen1" / "trajectories.csv"), "--out", str(lifted2_path),
         "--quiet"])
    assert lifted_path.read_bytes() == lifted2_path.read_bytes()


def test_train_psn_and_sympnet(workdir, capsys):
    root, cfg = workdir
    lifted = str(root / "lifted.csv")
    psn_dir = root / "psn"
    assert run(["train-psn", "--config", cfg, "--lifted", lifted,
                "--out", str(psn_dir)]) == 0
    out = capsys.readouterr().out
    assert "best val loss" in out
    metrics = (psn_dir / "psn_metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,train_loss,val_loss"
    assert len(metrics) == 4  # header + 3 epochs

    psn_archive = psn_dir / "psn_weights.json"
    before = psn_archive.read_bytes()
    sn_dir = root / "sympnet"
    assert run(["train-sympnet", "--config", cfg, "--lifted", lifted,
                "--psn", str(psn_archive), "--out", str(sn_dir),
                "--quiet"]) == 0
    assert psn_archive.read_bytes() == before
    assert (sn_dir / "sympnet_weights.json").exists()

    # rerun is byte-identical
    psn_dir2 = root / "psn2"
    assert run(["train-psn", "--config", cfg, "--lifted", lifted,
                "--out", str(psn_dir2), "--quiet"]) == 0
    assert (psn_dir2 / "psn_weights.json").read_bytes() == before
    assert ((psn_dir2 / "psn_metrics.csv").read_bytes()
            == (psn_dir / "psn_metrics.csv").read_bytes())


def test_rollout_outputs(workdir):
    root, cfg = workdir
    lifted = str(root / "lifted.csv")
    out_csv = root / "rollout.csv"
    code = run(["rollout", "--config", cfg, "--lifted", lifted,
                "--psn", str(root / "psn" / "psn_weights.json"),
                "--sympnet", str(root / "sympnet" / "sympnet_weights.json"),
                "--horizon", "30", "--out", str(out_csv), "--quiet"])
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0].startswith("k,t,actual_q0")
    assert "psn_p0" in lines[0]
    assert len(lines) == 32  # header + horizon + 1
    metrics = dict(line.split("=") for line in
                   (root / "rollout.csv.metrics").read_text().splitlines())
    assert float(metrics["p0_rmse"]) >= 0.0
    assert float(metrics["phi_drift"]) >= 0.0

    # identical rerun
    out2 = root / "rollout2.csv"
    run(["rollout", "--config", cfg, "--lifted", lifted,
         "--psn", str(root / "psn" / "psn_weights.json"),
         "--sympnet", str(root / "sympnet" / "sympnet_weights.json"),
         "--horizon", "30", "--out", str(out2), "--quiet"])
    assert out_csv.read_bytes() == out2.read_bytes()


def test_rollout_horizon_usage_error(workdir):
    root, cfg = workdir
    assert run(["rollout", "--config", cfg,
                "--lifted", str(root / "lifted.csv"),
                "--psn", str(root / "psn" / "psn_weights.json"),
                "--horizon", "100000", "--out", str(root / "x.csv"),
                "--quiet"]) == 1


def test_rollout_requires_weights(workdir):
    root, cfg = workdir
    assert run(["rollout", "--config", cfg,
                "--lifted", str(root / "lifted.csv"),
                "--horizon", "10", "--out", str(root / "x.csv"),
                "--quiet"]) == 1


def test_missing_config_is_usage_error(tmp_path):
    assert run(["generate", "--config", str(tmp_path / "nope.cfg"),
                "--out", str(tmp_path / "o"), "--quiet"]) == 1


def test_unknown_subcommand_usage():
    assert run(["frobnicate"]) == 1


def test_data_error_exit_code(workdir, tmp_path):
    root, cfg = workdir
    bad = tmp_path / "bad.csv"
    bad.write_text("traj_id,k,t\n")  # no sidecar
    assert run(["lift", "--config", cfg, "--traj", str(bad),
                "--out", str(tmp_path / "o.csv"), "--quiet"]) == 2


def test_verify_scopes(capsys):
    assert run(["verify", "--scope", "canonical", "--scope", "integrators"]) == 0
    out = capsys.readouterr().out
    assert "all" in out and "passed" in out


def test_verify_detects_corrupted_sympnet(tmp_path, capsys):
    import json

    from diraclift import nets
    g = np.random.Generator(np.random.PCG64(0))
    sn = nets.init_sympnet(3, g, n_modules=4, width=6, a_scale=1.0)
    path = tmp_path / "sn.json"
    dataio.save_weights(sn, path)
    assert run(["verify", "--scope", "sympnet", "--sympnet", str(path),
                "--quiet"]) == 0

    # transposing one module's K breaks the archive's shape contract and is
    # rejected naming the offending tensor
    arch = json.loads(path.read_text())
    for rec in arch["tensors"]:
        if rec["name"] == "modules.1.K":
            arr = np.asarray(rec["data"]).reshape(rec["shape"]).T
            rec["shape"] = list(arr.shape)
            rec["data"] = arr.ravel().tolist()
    (tmp_path / "bad.json").write_text(json.dumps(arch))
    code = run(["verify", "--scope", "sympnet",
                "--sympnet", str(tmp_path / "bad.json")])
    assert code == 2
    assert "modules.1.K" in capsys.readouterr().err

    # corrupted VALUES keep the map symplectic (any K gives a gradient shear):
    # the certificate still passes, which is the parametrization's guarantee
    arch2 = json.loads(path.read_text())
    for rec in arch2["tensors"]:
        if rec["name"] == "modules.1.K":
            arr = np.asarray(rec["data"]).reshape(rec["shape"])
            arr2 = arr.copy()
            arr2[:3, :3] = arr[:3, :3].T
            rec["data"] = arr2.ravel().tolist()
    (tmp_path / "bad_vals.json").write_text(json.dumps(arch2))
    assert run(["verify", "--scope", "sympnet",
                "--sympnet", str(tmp_path / "bad_vals.json"), "--quiet"]) == 0

    # breaking the module alternation is rejected at load time
    arch3 = json.loads(path.read_text())
    arch3["structure"]["kinds"] = ["up", "up", "low", "low"]
    (tmp_path / "bad2.json").write_text(json.dumps(arch3))
    assert run(["verify", "--scope", "sympnet",
                "--sympnet", str(tmp_path / "bad2.json"), "--quiet"]) == 2
