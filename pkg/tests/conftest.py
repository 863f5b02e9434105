import hashlib
import json
from pathlib import Path
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import sphereflow
from sphereflow.config import bundled, build_config, load_target
from sphereflow.trainer import load_checkpoint, read_metrics, train

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SRC = Path(sphereflow.__file__).parent


def source_digest():
    h = hashlib.sha1()
    for p in sorted(SRC.rglob("*.py")) + sorted(SRC.rglob("*.ini")):
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


class TrainedRun:
    def __init__(self, cfg, net, metrics, wall_seconds, target):
        self.cfg = cfg
        self.net = net
        self.metrics = metrics
        self.wall_seconds = wall_seconds
        self.target = target

    def final_eval(self):
        row = self.metrics[-1]
        return float(row["kl"]), float(row["kl_stderr"]), float(row["ess"])

    def losses(self):
        return np.array([float(r["loss"]) for r in self.metrics])


def trained_run(cache_root, config_name, seed):
    """Train (or reuse a cached run of) a bundled benchmark config.

    Runs are cached under the pytest cache, keyed by the package sources, so
    edits to the code invalidate them.
    """
    cfg = build_config(bundled(config_name), {"seed": seed})
    target = load_target(cfg.target)
    key = f"{Path(config_name).stem}-seed{seed}-{source_digest()}"
    out = Path(cache_root) / key
    done = out / "timing.json"
    if not done.exists():
        t0 = time.perf_counter()
        train(cfg, target, out_dir=out)
        wall = time.perf_counter() - t0
        done.write_text(json.dumps({"wall_seconds": wall}))
    wall = json.loads(done.read_text())["wall_seconds"]
    ck = load_checkpoint(out / "checkpoint.npz")
    return TrainedRun(cfg, ck.net, read_metrics(out / "metrics.csv"), wall, target)


@pytest.fixture(scope="session")
def run_cache(request):
    return request.config.cache.mkdir("trained-runs")


@pytest.fixture(scope="session")
def s2_run(run_cache):
    return trained_run(run_cache, "s2_benchmark.ini", 0)


@pytest.fixture(scope="session")
def s3_run(run_cache):
    return trained_run(run_cache, "s3_benchmark.ini", 0)


ACCEPTANCE_LINES = []


def report_criterion(label, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
