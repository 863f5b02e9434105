import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from sphereflow.cli import main
from sphereflow.config import (
    bundled,
    build_config,
    env_overrides,
    load_target,
    read_config_file,
    write_config,
    write_target,
)
from sphereflow.density import benchmark_mixture, uniform_limit_mixture
from sphereflow.errors import ConfigError
from sphereflow.manifest import RunManifest
from sphereflow.net import init_params, random_net
from sphereflow.trainer import AdamState, TrainConfig, load_checkpoint, params_hash, save_checkpoint

LOG_4PI = math.log(4 * math.pi)


def small_config(tmp_path, target="s2_vmf4.ini", **kw):
    values = dict(n=2, hidden=(6,), batch_size=16, epochs=1, steps=10, checkpoint_every=5, eval_samples=200,
                  target=str(bundled(target)) if not str(target).startswith("/") else target)
    values.update(kw)
    path = tmp_path / "run.ini"
    write_config(path, TrainConfig(**values))
    return path


def zero_head_checkpoint(tmp_path, n=2, target="s2_vmf4.ini"):
    cfg = TrainConfig(n=n, steps=10, eval_samples=500, target=str(bundled(target)))
    net = init_params(cfg.layer_sizes, 0)
    return save_checkpoint(tmp_path / f"zero{n}.npz", cfg, net, AdamState.zeros_like(net),
                           np.random.default_rng(0), 0)


# -- config files ------------------------------------------------------------

def test_bundled_benchmark_config():
    cfg = build_config(bundled("s2_benchmark.ini"))
    assert (cfg.n, cfg.hidden, cfg.lr, cfg.batch_size, cfg.epochs, cfg.steps) == (2, (10, 10), 1e-3, 256, 3000, 100)
    target = load_target(cfg.target)
    ref = benchmark_mixture(3)
    assert np.allclose(target.means, ref.means) and np.allclose(target.weights, ref.weights)
    assert build_config(bundled("s3_benchmark.ini")).n == 3


def test_precedence_file_env_flags(tmp_path):
    path = small_config(tmp_path, seed=1, epochs=5)
    env = {"SPHEREFLOW_SEED": "2", "SPHEREFLOW_EPOCHS": "7", "SPHEREFLOW_UNRELATED": "x"}
    cfg = build_config(path, {"seed": 3, "epochs": None}, environ=env)
    assert cfg.seed == 3 and cfg.epochs == 7
    assert build_config(path, environ={}).seed == 1
    assert env_overrides({"SPHEREFLOW_DETERMINISTIC": "false"}) == {"deterministic": "false"}
    assert build_config(path, environ={"SPHEREFLOW_DETERMINISTIC": "no"}).deterministic is False


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(hidden=(7, 3), lr=3e-4, grad_mode="adjoint", deterministic=False, target="/x/t.ini")
    write_config(tmp_path / "c.ini", cfg)
    assert build_config(tmp_path / "c.ini", environ={}) == cfg


@pytest.mark.parametrize("text", [
    "[train]\nlearning_rate = 1\n",
    "[train]\nseed = 1\n[run]\nseed = 2\n",
    "[train]\nseed = one\n",
    "[train]\ngrad_mode = exact\n",
    "no section header\n",
])
def test_bad_config_files(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        build_config(path, environ={})


def test_relative_target_resolved_against_config_dir(tmp_path):
    (tmp_path / "c.ini").write_text("[data]\ntarget = t.ini\n")
    assert read_config_file(tmp_path / "c.ini")["target"] == str(tmp_path / "t.ini")


def test_target_round_trip(tmp_path):
    mix = benchmark_mixture(4)
    write_target(tmp_path / "t.ini", mix)
    back = load_target(tmp_path / "t.ini")
    assert np.allclose(back.means, mix.means, atol=1e-15) and np.array_equal(back.kappas, mix.kappas)


@pytest.mark.parametrize("body", [
    "dim = 3\nweights = 0.5, 0.4\nkappas = 1, 1\nmeans = 0 0 1; 1 0 0\n",
    "dim = 3\nweights = 1\nkappas = 1\nmeans = 0 1\n",
    "dim = 3\nweights = 1\nmeans = 0 0 1\n",
    "dim = 5\nweights = 1\nkappas = 1\nmeans = 0 0 0 0 1\n",
])
def test_bad_target_files(tmp_path, body):
    (tmp_path / "t.ini").write_text("[target]\n" + body)
    with pytest.raises(ConfigError):
        load_target(tmp_path / "t.ini")


# -- CLI ---------------------------------------------------------------------

def test_train_one_epoch(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(small_config(tmp_path)), "--out", str(out), "--seed", "4"]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 1 and set(rows[0]) >= {"epoch", "loss", "wall_ms", "kl", "ess"}
    ck = load_checkpoint(out / "checkpoint.npz")
    manifest = RunManifest.read(out / "manifest.json")
    assert manifest.seed == 4 and manifest.config["seed"] == 4
    assert manifest.params_sha1 == params_hash(ck.net)
    assert manifest.started <= manifest.finished and manifest.tool_version
    assert "KL" in capsys.readouterr().out


def test_manifest_reproduces_run(tmp_path):
    out = tmp_path / "a"
    main(["train", "--config", str(small_config(tmp_path, epochs=3)), "--out", str(out), "--steps", "5"])
    manifest = RunManifest.read(out / "manifest.json")
    write_config(tmp_path / "echo.ini", TrainConfig.from_dict(manifest.config))
    main(["train", "--config", str(tmp_path / "echo.ini"), "--out", str(tmp_path / "b")])
    assert RunManifest.read(tmp_path / "b" / "manifest.json").params_sha1 == manifest.params_sha1


def test_flags_override_config(tmp_path):
    out = tmp_path / "out"
    args = ["train", "--config", str(small_config(tmp_path)), "--out", str(out), "--epochs", "2", "--steps", "4",
            "--grad-mode", "adjoint", "--threads", "1", "--deterministic", "false"]
    assert main(args) == 0
    cfg = RunManifest.read(out / "manifest.json").config
    assert (cfg["epochs"], cfg["steps"], cfg["grad_mode"], cfg["deterministic"]) == (2, 4, "adjoint", False)


def test_env_override_reaches_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("SPHEREFLOW_EPOCHS", "2")
    out = tmp_path / "out"
    assert main(["train", "--config", str(small_config(tmp_path)), "--out", str(out)]) == 0
    assert len(list(csv.DictReader(open(out / "metrics.csv")))) == 2
    monkeypatch.setenv("SPHEREFLOW_EPOCHS", "two")
    assert main(["train", "--config", str(small_config(tmp_path)), "--out", str(out)]) == 2


def test_missing_target_exit_2(tmp_path, capsys):
    missing = str(tmp_path / "nowhere.ini")
    assert main(["train", "--config", str(small_config(tmp_path, target=missing)), "--out", str(tmp_path)]) == 2
    assert missing in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["train", "--no-such-flag"]) == 2
    assert main(["check", "--scope", "everything"]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2


def test_eval_zero_head_vs_uniform_target(tmp_path, capsys):
    ck = zero_head_checkpoint(tmp_path)
    write_target(tmp_path / "uniform.ini", uniform_limit_mixture(3))
    reports = []
    for name in ("a.json", "b.json"):
        assert main(["eval", "--checkpoint", str(ck), "--target", str(tmp_path / "uniform.ini"),
                     "--seed", "3", "--n-samples", "1000", "--out", str(tmp_path / name)]) == 0
        reports.append(json.loads((tmp_path / name).read_text()))
    assert reports[0] == reports[1]
    assert abs(reports[0]["kl_nats"]) < 1e-10 and reports[0]["ess_percent"] == pytest.approx(100.0, abs=1e-8)
    assert (tmp_path / "a.json.manifest.json").exists()
    assert "ESS" in capsys.readouterr().out


def test_eval_rejects_bad_checkpoint(tmp_path):
    ck = zero_head_checkpoint(tmp_path)
    with np.load(ck) as z:
        arrays = dict(z)
    meta = json.loads(str(arrays["meta"]))
    meta["format_version"] = 0
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(tmp_path / "old.npz", **arrays)
    assert main(["eval", "--checkpoint", str(tmp_path / "old.npz")]) == 2
    assert main(["eval", "--checkpoint", str(ck), "--target", str(bundled("s3_vmf4.ini"))]) == 2


def test_sample_csv(tmp_path):
    ck = zero_head_checkpoint(tmp_path)
    for name in ("s1.csv", "s2.csv"):
        assert main(["sample", "--checkpoint", str(ck), "--count", "5", "--seed", "2", "--out", str(tmp_path / name)]) == 0
    text = (tmp_path / "s1.csv").read_bytes()
    assert text == (tmp_path / "s2.csv").read_bytes()
    rows = list(csv.reader(text.decode().splitlines()))
    assert rows[0] == ["x0", "x1", "x2", "log_q"] and len(rows) == 6
    data = np.array(rows[1:], dtype=float)
    assert np.allclose(np.linalg.norm(data[:, :3], axis=1), 1.0, atol=1e-9)
    assert np.allclose(data[:, 3], -LOG_4PI, atol=1e-15)


def test_grid_csv(tmp_path):
    ck = zero_head_checkpoint(tmp_path)
    assert main(["grid", "--checkpoint", str(ck), "--resolution", "10", "20", "--out", str(tmp_path / "g.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "g.csv")))
    assert len(rows) == 200 and list(rows[0]) == ["theta", "phi", "log_density"]
    assert np.allclose([float(r["log_density"]) for r in rows], -LOG_4PI, atol=1e-15)


def test_grid_requires_s2(tmp_path):
    ck = zero_head_checkpoint(tmp_path, n=3, target="s3_vmf4.ini")
    assert main(["grid", "--checkpoint", str(ck), "--resolution", "4", "8", "--out", str(tmp_path / "g.csv")]) == 2


def test_numeric_failure_exit_3(tmp_path, capsys):
    cfg = TrainConfig(hidden=(3,), steps=10, target=str(bundled("s2_vmf4.ini")))
    net = random_net(cfg.layer_sizes, seed=0, scale=1e200)
    ck = save_checkpoint(tmp_path / "huge.npz", cfg, net, AdamState.zeros_like(net), np.random.default_rng(), 0)
    assert main(["sample", "--checkpoint", str(ck), "--count", "3", "--out", str(tmp_path / "s.csv")]) == 3
    assert "numeric" in capsys.readouterr().err


def test_check_divergence_scope(capsys):
    assert main(["check", "--scope", "divergence"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "divergence" in out and "FAIL" not in out


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sphereflow.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "sphereflow" in res.stdout
