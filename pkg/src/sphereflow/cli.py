"""Command-line entry point: ``sphereflow {train,eval,sample,grid,check}``.

Exit codes: 0 ok, 2 usage or configuration error, 3 numeric failure.
Every config key can also be set through ``SPHEREFLOW_<KEY>`` environment
variables; explicit flags win over both.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from ._accel import set_threads
from .checks import SCOPES, run_checks
from .config import build_config, bundled, load_target
from .density import evaluate, latlon_grid, log_density_at, sample_model
from .errors import ConfigError
from .flow import IntegratorConfig
from .manifest import RunManifest
from .trainer import load_checkpoint, params_hash, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("sphereflow")


def _bool_flag(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", help="output directory (train) or file (eval/sample/grid)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--steps", type=int, help="RK4 steps over [0, 1]")
    common.add_argument("--deterministic", type=_bool_flag, nargs="?", const=True, metavar="BOOL")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sphereflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", parents=[common], help="fit a flow to a target mixture")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--grad-mode", choices=("adjoint", "discretize"))
    tr.add_argument("--target", help="target INI file (overrides the config)")
    tr.add_argument("--resume", help="checkpoint to continue from")

    ev = sub.add_parser("eval", parents=[common], help="KL and ESS of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--target", help="target INI file (default: the one used for training)")
    ev.add_argument("--n-samples", type=int)

    sa = sub.add_parser("sample", parents=[common], help="draw samples with their model log-density")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--count", type=int, default=1000)

    gr = sub.add_parser("grid", parents=[common], help="model log-density on a latitude/longitude grid (S^2)")
    gr.add_argument("--checkpoint", required=True)
    gr.add_argument("--resolution", type=int, nargs=2, default=(200, 400), metavar=("N_LAT", "N_LON"))

    ch = sub.add_parser("check", parents=[common], help="numerical self-diagnostics")
    ch.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    return p


def resolve_target_path(path):
    p = Path(path)
    if p.is_file() or p.is_absolute():
        return p
    packaged = bundled(p.name)
    return packaged if packaged.is_file() else p


def _overrides(args, keys):
    return {k: getattr(args, k, None) for k in keys}


def _integrator(args, cfg_steps):
    return IntegratorConfig(args.steps if args.steps is not None else cfg_steps)


def _open_out(path):
    if path is None or path == "-":
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


def _manifest_path(out):
    return None if out in (None, "-") else Path(str(out) + ".manifest.json")


def cmd_train(args):
    over = _overrides(args, ("seed", "threads", "steps", "epochs", "deterministic", "target"))
    over["grad_mode"] = args.grad_mode
    cfg = build_config(args.config, over)
    if not cfg.target:
        raise ConfigError("no target file given (set target in the config or pass --target)")
    target = load_target(resolve_target_path(cfg.target))
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed)
    net, history = train(cfg, target, out_dir=out, resume=args.resume)
    extra = {"epochs_run": len(history.rows)}
    if history.evals:
        epoch, rep = history.evals[-1]
        extra["final_eval"] = dict(rep.as_dict(), epoch=epoch)
        print(f"epoch {epoch}: KL {rep.kl_nats:.5f} +- {rep.kl_stderr:.5f} nats, ESS {rep.ess_percent:.2f}%")
    manifest.finish(params_hash(net), **extra).write(out / "manifest.json")
    return EXIT_OK


def _load(args):
    ck = load_checkpoint(args.checkpoint)
    set_threads(args.threads if args.threads is not None else ck.cfg.threads)
    return ck


def cmd_eval(args):
    ck = _load(args)
    target_path = args.target or ck.cfg.target
    if not target_path:
        raise ConfigError("checkpoint records no target; pass --target")
    target = load_target(resolve_target_path(target_path))
    if target.dim != ck.net.dim:
        raise ConfigError(f"target lives in R^{target.dim} but the checkpoint model in R^{ck.net.dim}")
    seed = args.seed if args.seed is not None else 0
    n = args.n_samples or ck.cfg.eval_samples
    rep = evaluate(ck.net, target, _integrator(args, ck.cfg.steps), n, seed)
    report = dict(rep.as_dict(), epoch=ck.epoch)
    print(f"KL {rep.kl_nats:.6f} +- {rep.kl_stderr:.6f} nats, ESS {rep.ess_percent:.3f}% (N={n}, seed={seed})")
    if args.out and args.out != "-":
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        _write_side_manifest(args, ck, seed, {"report": report})
    return EXIT_OK


def cmd_sample(args):
    ck = _load(args)
    if args.count < 1:
        raise ConfigError("--count must be positive")
    seed = args.seed if args.seed is not None else 0
    x, log_q = sample_model(ck.net, _integrator(args, ck.cfg.steps), args.count, seed)
    fh, close = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["log_q"])
        for row, lq in zip(x, log_q):
            w.writerow([repr(float(v)) for v in row] + [repr(float(lq))])
    finally:
        if close:
            fh.close()
    _write_side_manifest(args, ck, seed, {"count": args.count})
    return EXIT_OK


def cmd_grid(args):
    ck = _load(args)
    if ck.net.dim != 3:
        raise ConfigError(f"grid output is only defined on S^2, checkpoint is on S^{ck.net.dim - 1}")
    n_lat, n_lon = args.resolution
    if n_lat < 1 or n_lon < 1:
        raise ConfigError("--resolution values must be positive")
    theta, phi, pts = latlon_grid(n_lat, n_lon)
    logd = log_density_at(ck.net, pts, _integrator(args, ck.cfg.steps))
    fh, close = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "phi", "log_density"])
        for row in zip(theta, phi, logd):
            w.writerow([repr(float(v)) for v in row])
    finally:
        if close:
            fh.close()
    _write_side_manifest(args, ck, None, {"n_lat": n_lat, "n_lon": n_lon})
    return EXIT_OK


def _write_side_manifest(args, ck, seed, extra):
    path = _manifest_path(args.out)
    if path is None:
        return
    m = RunManifest(args.command, ck.cfg.to_dict(), ck.cfg.seed if seed is None else seed)
    m.finish(params_hash(ck.net), checkpoint=str(args.checkpoint), **extra).write(path)


def cmd_check(args):
    if args.threads is not None:
        set_threads(args.threads)
    results = run_checks(args.scope, seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  observed {r.observed:.3e}  tolerance {r.tolerance:.1e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "grid": cmd_grid, "check": cmd_check}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sphereflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"sphereflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining ValueErrors (off-sphere points, oversize steps) are numeric
        print(f"sphereflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
