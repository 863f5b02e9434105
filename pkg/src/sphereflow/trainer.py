"""Reverse-KL density matching with Adam.

One "epoch" is one optimizer step on a fresh batch of base samples.
"""
import csv
import hashlib
from dataclasses import asdict, dataclass, field, fields
import json
import logging
from pathlib import Path
import time

import numpy as np

from . import __version__
from ._accel import set_threads
from .density import evaluate, mixture_log_density, tangential_score
from .errors import ConfigError
from .flow import IntegratorConfig, backprop_discretize, forward_with_tape, integrate_backward_adjoint
from .geometry import log_uniform_density, sample_uniform
from .net import CoefficientNet, default_layer_sizes, init_params

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GRAD_MODES = ("adjoint", "discretize")
METRIC_COLUMNS = ("epoch", "loss", "wall_ms", "kl", "kl_stderr", "ess")


@dataclass
class TrainConfig:
    n: int = 2
    hidden: tuple = (10, 10)
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10000
    steps: int = 100
    grad_mode: str = "discretize"
    seed: int = 0
    checkpoint_every: int = 500
    eval_samples: int = 20000
    target: str = ""
    threads: int = 1
    deterministic: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}")
        positive = ("n", "lr", "batch_size", "steps", "checkpoint_every", "eval_samples", "threads")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.epochs < 0 or self.seed < 0:
            raise ConfigError("epochs and seed must be non-negative")
        if not self.hidden or min(self.hidden) <= 0:
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden!r}")

    @property
    def layer_sizes(self):
        return default_layer_sizes(self.n, self.hidden)

    @property
    def integrator(self):
        return IntegratorConfig(self.steps)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, net):
        return cls(np.zeros_like(net.theta), np.zeros_like(net.theta))


def adam_step(state, net, grad, lr):
    """Bias-corrected Adam update; returns ``(new_net, new_state)`` without mutating inputs."""
    if grad.shape != net.theta.shape or state.m.shape != net.theta.shape:
        raise ValueError("gradient / moment shapes do not match the network parameters")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    theta = net.theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, step, state.beta1, state.beta2, state.eps)
    return net.with_params(theta), new_state


def loss_and_grad(net, target, batch_size, cfg, rng, q0=None):
    """Monte Carlo reverse KL on one batch and its parameter gradient.

    ``q0`` overrides the base draws (used to share samples across calls).
    """
    n = net.dim - 1
    if q0 is None:
        q0 = sample_uniform(rng, batch_size, n)
    B = q0.shape[0]
    icfg = cfg.integrator
    x, ell, tape = forward_with_tape(net, q0, icfg)
    log_q = log_uniform_density(n) + ell
    loss = float(np.mean(log_q - mixture_log_density(target, x)))
    gq1 = -tangential_score(target, x) / B
    gl = np.full(B, 1.0 / B)
    if cfg.grad_mode == "discretize":
        res = backprop_discretize(net, q0, icfg, gq1, gl, tape=tape)
    else:
        res = integrate_backward_adjoint(net, x, gq1, gl, icfg)
    return loss, res.param_grad


# -- checkpoints ------------------------------------------------------------

def git_blob_hash(data):
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def params_hash(net):
    return git_blob_hash(np.ascontiguousarray(net.theta, dtype="<f8").tobytes())


def save_checkpoint(path, cfg, net, adam, rng, epoch):
    arrays = {}
    for k, (W, b) in enumerate(net.layers()):
        arrays[f"W{k}"] = W
        arrays[f"b{k}"] = b
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "layer_sizes": list(net.layer_sizes),
        "epoch": int(epoch),
        "config": cfg.to_dict(),
        "rng_state": rng.bit_generator.state,
        "adam": {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "params_sha1": params_hash(net),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), adam_m=adam.m, adam_v=adam.v, **arrays)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    cfg: TrainConfig
    net: CoefficientNet
    adam: AdamState
    rng_state: dict
    epoch: int
    meta: dict = field(default_factory=dict)

    def rng(self):
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            version = meta.get("format_version")
            if version != CHECKPOINT_VERSION:
                raise ConfigError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
            sizes = tuple(meta["layer_sizes"])
            parts = []
            for k in range(len(sizes) - 1):
                parts += [z[f"W{k}"].ravel(), z[f"b{k}"]]
            net = CoefficientNet(sizes, np.concatenate(parts))
            a = meta["adam"]
            adam = AdamState(z["adam_m"].copy(), z["adam_v"].copy(), a["step"], a["beta1"], a["beta2"], a["eps"])
    except (KeyError, ValueError, OSError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"unreadable checkpoint {path}: {exc}") from None
    return Checkpoint(TrainConfig.from_dict(meta["config"]), net, adam, meta["rng_state"], meta["epoch"], meta)


# -- training loop ----------------------------------------------------------

@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def losses(self):
        return np.array([r["loss"] for r in self.rows])


def _eval_report(net, target, cfg, epoch):
    # evaluation draws never touch the training stream
    seed = int(np.random.SeedSequence([cfg.seed, epoch, 7]).generate_state(1)[0])
    return evaluate(net, target, cfg.integrator, cfg.eval_samples, seed)


def train(cfg, target, out_dir=None, resume=None, callback=None):
    """Optimize a fresh (or resumed) network against ``target``.

    Writes ``metrics.csv`` and checkpoints into ``out_dir`` when given. KL/ESS
    are evaluated every ``checkpoint_every`` epochs and at the last epoch.
    Returns ``(net, history)``.
    """
    set_threads(cfg.threads)
    if target.dim != cfg.n + 1:
        raise ConfigError(f"target lives in R^{target.dim} but the model sphere is S^{cfg.n}")
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if tuple(ck.net.layer_sizes) != tuple(cfg.layer_sizes):
            raise ConfigError("checkpoint architecture does not match the configuration")
        net, adam, rng, start = ck.net, ck.adam, ck.rng(), ck.epoch
    else:
        net = init_params(cfg.layer_sizes, cfg.seed)
        adam = AdamState.zeros_like(net)
        rng = np.random.default_rng(cfg.seed)
        start = 0

    history = TrainHistory()
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.csv"
        append = resume is not None and metrics.exists()
        if append:
            _truncate_metrics(metrics, start)
        fh = open(metrics, "a" if append else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if not append:
            writer.writeheader()

    try:
        if cfg.epochs == start:
            history.evals.append((start, _eval_report(net, target, cfg, start)))
        for epoch in range(start + 1, cfg.epochs + 1):
            t_start = time.perf_counter()
            loss, grad = loss_and_grad(net, target, cfg.batch_size, cfg, rng)
            net, adam = adam_step(adam, net, grad, cfg.lr)
            row = {"epoch": epoch, "loss": loss, "wall_ms": 1e3 * (time.perf_counter() - t_start)}
            row.update(kl="", kl_stderr="", ess="")
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                rep = _eval_report(net, target, cfg, epoch)
                history.evals.append((epoch, rep))
                row.update(kl=rep.kl_nats, kl_stderr=rep.kl_stderr, ess=rep.ess_percent)
                log.info("epoch %d loss %.5f kl %.5f ess %.2f", epoch, loss, rep.kl_nats, rep.ess_percent)
                if out_dir is not None:
                    _write_checkpoints(out_dir, cfg, net, adam, rng, epoch)
            history.rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if callback is not None:
                callback(epoch, net, row)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None and cfg.epochs == start:
        _write_checkpoints(out_dir, cfg, net, adam, rng, start)
    return net, history


def _write_checkpoints(out_dir, cfg, net, adam, rng, epoch):
    save_checkpoint(out_dir / f"checkpoint_{epoch:06d}.npz", cfg, net, adam, rng, epoch)
    save_checkpoint(out_dir / "checkpoint.npz", cfg, net, adam, rng, epoch)


def _truncate_metrics(path, last_epoch):
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= last_epoch]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
