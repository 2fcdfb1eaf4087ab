"""Command line: pretrain, adapt, verify-theorem, gradcheck, gen-data, plot.

Exit codes: 0 success, 2 usage/config error, 3 data/checkpoint error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .adapt import run_stream, write_metrics_csv
from .config import RunConfig, ConfigError, load_config
from .synthdata import TrainingDivergedError, gen_labeled, gen_stream, pretrain_source

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("brimpr_lab")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config keys (override the config file)")
    for f in fields(RunConfig):
        doc = f.metadata.get("doc", "")
        ref = f.metadata.get("ref")
        default = f.default
        note = f" [default {default}" + (f"; reference: {ref}]" if ref else "]")
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("adapt", "continual", "max_adapt_batches"):
            continue
        g.add_argument(flag, dest=f.name, default=None, metavar=f.type.upper(), help=doc + note)


def _overrides(args) -> dict:
    return {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), _overrides(args))


def _load(path):
    try:
        return ckpt.load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}", EXIT_DATA) from None
    except (ckpt.CheckpointError, ValueError) as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}", EXIT_DATA) from None


# ---------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    cfg = _config(args)
    rng = np.random.default_rng(cfg.seed)
    try:
        res = pretrain_source(cfg.model_config(), cfg.task_spec(), cfg.pretrain_epochs, rng,
                              n_train=cfg.n_train, n_test=cfg.n_test, n_source=cfg.n_source,
                              batch_size=cfg.pretrain_batch, lr=cfg.pretrain_lr,
                              contrastive_weight=cfg.contrastive_weight)
    except TrainingDivergedError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    extra = task_tensors(cfg)
    extra["data/source/a"] = res.source_xa
    extra["data/source/v"] = res.source_xv
    try:
        ckpt.save_checkpoint(args.out, res.bundle, res.bank, extra)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_DATA) from None
    _emit({"checkpoint": str(args.out), "clean_accuracy": res.clean_accuracy,
           "clean_accuracy_prompted": res.clean_accuracy_prompted,
           "final_loss": res.losses[-1] if res.losses else None,
           "frozen_checksum": res.bundle.frozen_checksum()})
    return EXIT_OK


TASK_KEYS = ("separation", "noise", "task_seed")


def task_tensors(cfg: RunConfig) -> dict[str, np.ndarray]:
    return {f"task/{k}": np.array(float(getattr(cfg, k))) for k in TASK_KEYS}


def cmd_adapt(args) -> int:
    overrides = _overrides(args)
    bundle, bank, rest = _load(args.checkpoint)
    if bank is None:
        raise CliError("checkpoint has no source statistics", EXIT_DATA)
    # the task and model shape come from the checkpoint unless overridden explicitly
    for k in TASK_KEYS:
        if overrides.get(k) is None and f"task/{k}" in rest:
            v = float(rest[f"task/{k}"])
            overrides[k] = int(v) if k == "task_seed" else v
    mc = bundle.config
    for key, val in (("layers", mc.n_layers), ("joint_layers", mc.n_joint_layers), ("dim", mc.dim),
                     ("heads", mc.heads), ("tokens", mc.tokens), ("prompts", mc.n_prompts),
                     ("d_in", mc.d_in), ("classes", mc.classes)):
        overrides[key] = val
    overrides["adapt"] = not args.no_adapt
    overrides["continual"] = args.continual or None
    overrides["max_adapt_batches"] = args.max_adapt_batches
    cfg = load_config(args.config, overrides)
    stream = gen_stream(cfg.task_spec(), cfg.stream_config())
    checksum = bundle.frozen_checksum()
    original = copy.deepcopy(bundle)
    acfg = cfg.adapt_config()
    result = run_stream(bundle, bank, stream.batches, acfg, stream.labels)
    frozen = result if not acfg.adapt else run_stream(copy.deepcopy(original), bank, stream.batches,
                                                         replace(acfg, adapt=False), stream.labels)
    if bundle.frozen_checksum() != checksum:
        raise CliError("frozen weights changed during adaptation", EXIT_NUMERIC)
    if args.metrics:
        write_metrics_csv(args.metrics, result.records)
    summary = dict(result.summary)
    summary["acc_source_frozen"] = frozen.summary["acc_adapted"]
    summary["frozen_checksum"] = checksum
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if args.save_prompts:
        ckpt.save_checkpoint(args.save_prompts, bundle, bank, rest)
    _emit(summary)
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    from .stats import theorem1_closed_form, theorem1_monte_carlo
    if args.trials < 1000:
        raise CliError(f"--trials must be at least 1000, got {args.trials}", EXIT_USAGE)
    if args.d < 1 or args.n < 2:
        raise CliError("--d must be >= 1 and --n >= 2", EXIT_USAGE)
    rng = np.random.default_rng(args.seed)
    sigma = make_sigma(args.sigma, args.d, rng)
    frob, diag = theorem1_closed_form(sigma, args.n)
    mc = theorem1_monte_carlo(sigma, args.n, args.trials, rng)
    rel_f = abs(mc.frob_mse - frob) / frob if frob else abs(mc.frob_mse)
    rel_d = abs(mc.diag_mse - diag) / diag if diag else abs(mc.diag_mse)
    _emit({"d": args.d, "n": args.n, "trials": args.trials, "sigma": args.sigma,
           "closed_form": {"frobenius_mse": frob, "diag_mse": diag},
           "empirical": {"frobenius_mse": mc.frob_mse, "diag_mse": mc.diag_mse},
           "relative_error": {"frobenius_mse": rel_f, "diag_mse": rel_d},
           "tolerance": 0.05, "pass": bool(rel_f < 0.05 and rel_d < 0.05)})
    return EXIT_OK


def make_sigma(kind: str, d: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "identity":
        return np.eye(d)
    A = rng.standard_normal((d, d))
    s = A @ A.T / d + 0.1 * np.eye(d)
    return 0.5 * (s + s.T)


def cmd_gradcheck(args) -> int:
    from .selfcheck import gradcheck_report
    report = gradcheck_report(seed=args.seed, corrupt=args.corrupt_gradient)
    _emit(report)
    return EXIT_OK if report["pass"] or args.corrupt_gradient else EXIT_NUMERIC


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    task = cfg.task_spec()
    rng = np.random.default_rng(cfg.seed)
    named = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test), ("source", cfg.n_source)):
        xa, xv, y = gen_labeled(task, n, rng)
        named[f"data/{split}/a"], named[f"data/{split}/v"], named[f"data/{split}/y"] = xa, xv, y.astype(float)
    stream = gen_stream(task, cfg.stream_config())
    for t, (b, y) in enumerate(zip(stream.batches, stream.labels)):
        named[f"data/stream/a/{t:05d}"] = b.xa
        named[f"data/stream/v/{t:05d}"] = b.xv
        named[f"data/stream/y/{t:05d}"] = y.astype(float)
    try:
        ckpt.save_tensors(args.out, named)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_DATA) from None
    _emit({"out": str(args.out), "tensors": len(named), "stream_batches": len(stream.batches)})
    return EXIT_OK


def cmd_plot(args) -> int:
    from .report import plot_metrics
    try:
        paths = plot_metrics(args.metrics, args.out_dir)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot plot {args.metrics}: {exc}", EXIT_DATA) from None
    _emit({"figures": [str(p) for p in paths]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="brimpr", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("pretrain", help="train the source model, write a BMPR1 checkpoint")
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--out", required=True, help="checkpoint path")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="run online adaptation over a synthetic test stream")
    sp.add_argument("checkpoint")
    sp.add_argument("--config", help="stream / adaptation config file")
    sp.add_argument("--continual", action="store_true", help="enable drift detection and prompt resets")
    sp.add_argument("--no-adapt", action="store_true", help="frozen inference only")
    sp.add_argument("--max-adapt-batches", type=int, default=None)
    sp.add_argument("--metrics", help="per-step CSV output")
    sp.add_argument("--summary", help="summary JSON output (also printed)")
    sp.add_argument("--save-prompts", help="write the adapted bundle to this checkpoint")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("verify-theorem", help="Monte-Carlo check of the covariance MSE closed forms")
    sp.add_argument("--d", type=int, default=4)
    sp.add_argument("--n", type=int, default=11)
    sp.add_argument("--trials", type=int, default=10000)
    sp.add_argument("--sigma", choices=("identity", "random-psd"), default="identity")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify_theorem)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss on a tiny model")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="dump a synthetic dataset and stream as BMPR1 tensors")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("plot", help="render figures from a metrics CSV")
    sp.add_argument("metrics")
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
