"""Command-line entry point: ``tinyssl <command> ...``.

Exit status is 0 on success, 1 when a workflow fails at runtime and 2 for
usage or configuration errors.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import budget, checkpoint, gradcheck, probe
from .config import ConfigError, help_text, parse_config
from .data import DataFormatError, synth_dataset_generate, write_cifar_binary
from .engine import (SWEEP_GRIDS, backbone_spec, head_spec, load_datasets, load_student, run_pretrain,
                     run_sweep, teacher_stage_dims)
from .model import build_student
from .optim import TrainingError
from .teacher import MAGIC as STORE_MAGIC
from .teacher import StoreFormatError, TeacherStore, synth_teacher_generate, write_store
from .tensor import ContractError, ShapeError


class UsageError(Exception):
    pass


def _read_config(path, overrides):
    text = ""
    if path:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    return text, parse_config(text, overrides)


def _say(args, msg):
    if not getattr(args, "quiet", False):
        print(msg, flush=True)


# --- pretrain -------------------------------------------------------------------

def cmd_pretrain(args):
    _, cfg = _read_config(args.config, args.set)

    def progress(epoch, losses, stats):
        parts = " ".join(f"{k}={v:.4f}" for k, v in losses.items())
        _say(args, f"epoch {epoch}: {parts} feat_std={stats['mean_per_dim_std']:.3g} "
                   f"rank={stats['rank_proxy']:.1f}{' COLLAPSED' if stats['collapsed'] else ''}")

    run_pretrain(cfg, resume=args.resume, progress=progress)
    _say(args, f"wrote {os.path.join(cfg['output_dir'], 'metrics.csv')} and checkpoint.tdck")
    return 0


# --- probe ----------------------------------------------------------------------

def _probe_config(cfg):
    return probe.ProbeConfig(lr=cfg["probe.lr"], momentum=cfg["probe.momentum"], epochs=cfg["probe.epochs"],
                             batch=cfg["probe.batch"], weight_decay=cfg["probe.weight_decay"])


def cmd_probe(args):
    if args.random_init:
        if args.checkpoint:
            raise UsageError("--random-init builds a fresh network; drop --checkpoint")
        _, cfg = _read_config(args.config, args.set)
        dtype = np.float64 if cfg["dtype"] == "float64" else np.float32
        net = build_student(backbone_spec(cfg), head_spec(cfg), cfg["seed"], dtype)
        tag = args.tag or "random_init"
    else:
        if not args.checkpoint:
            raise UsageError("probe needs --checkpoint or --random-init")
        net, cfg, _ = load_student(args.checkpoint)
        if args.config:
            raise UsageError("--checkpoint carries its own config; adjust it with --set")
        if args.set:
            cfg = parse_config(cfg.to_text(), args.set)
        tag = args.tag or "pretrained"
    train, test = load_datasets(cfg)
    space = cfg["probe.space"]
    ftr, ytr = probe.extract_features(net, train, space=space)
    clf = probe.train_linear_probe(ftr, ytr, _probe_config(cfg), seed=cfg["seed"])
    if test is not None:
        fte, yte = probe.extract_features(net, test, space=space)
    else:
        fte, yte = ftr, ytr
    acc = probe.evaluate_accuracy(clf, fte, yte)
    out = args.output_dir or cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    probe.append_result(os.path.join(out, "results.csv"), tag, cfg.method, cfg["seed"], acc)
    msg = f"{tag}: linear probe accuracy {acc:.4f} ({'held-out' if test is not None else 'train'} set, {space})"
    if args.knn:
        msg += f"; {args.knn}-NN accuracy {probe.knn_probe(fte, yte, args.knn):.4f}"
    _say(args, msg)
    return 0


# --- budget ---------------------------------------------------------------------

def cmd_budget(args):
    platforms = [budget.parse_platform(p) for p in args.platform] or list(budget.DEFAULT_PLATFORMS)
    rep = budget.budget_report(args.alpha, args.overhead, platforms)
    kinds = ("capacity_proportional_linear", "seed_mlp") if args.head == "all" else (args.head,)
    rows = budget.report_rows(rep, kinds)
    text = budget.format_table(rows)
    os.makedirs(args.output_dir, exist_ok=True)
    with open(os.path.join(args.output_dir, "report.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(args.output_dir, "budget.csv"), "w", newline="") as f:
        f.write(budget.format_csv(rows))
    sys.stdout.write(budget.format_csv(rows) if args.csv else text)
    return 0


# --- teacher / data generation ----------------------------------------------------

def cmd_teacher_synth(args):
    _, cfg = _read_config(args.config, args.set)
    train, _ = load_datasets(cfg)
    spec = backbone_spec(cfg)
    dims = [] if args.cls_only else teacher_stage_dims(spec, train.resolution)
    seed = cfg["teacher.synth_seed"] if args.seed is None else args.seed
    out = args.output or os.path.join(cfg["output_dir"], "teacher.tfst")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_store(out, synth_teacher_generate(train, seed, dims))
    _say(args, f"wrote {len(train)} teacher records to {out}")
    return 0


def cmd_data_synth(args):
    ds = synth_dataset_generate(args.classes, args.per_class, 32, args.seed)
    os.makedirs(os.path.dirname(args.output) or ".", exist_ok=True)
    write_cifar_binary(args.output, ds, args.variant)
    _say(args, f"wrote {len(ds)} images ({args.classes} classes) to {args.output}")
    return 0


# --- gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args):
    names = args.suite or None
    unknown = [n for n in names or () if n not in gradcheck.SUITES]
    if unknown:
        raise UsageError(f"unknown suite {unknown[0]!r}; choose from {', '.join(gradcheck.SUITES)}")
    results = gradcheck.run_all(args.shapes, args.seed, names)
    worst = 0.0
    for name, err in results.items():
        worst = max(worst, err)
        print(f"{name:<20} max rel err {err:.3e}  {'ok' if err < args.tol else 'FAIL'}")
    ok = worst < args.tol
    print(f"{'all suites pass' if ok else 'gradient check failed'} (worst {worst:.3e}, tol {args.tol:g})")
    return 0 if ok else 1


# --- sweep ----------------------------------------------------------------------

def cmd_sweep(args):
    text, cfg = _read_config(args.config, args.set)
    out = args.output_dir or cfg["output_dir"]
    extra = [s for s in args.set if not s.split("=", 1)[0].strip() == "output_dir"]

    def progress(epoch, losses, stats):
        _say(args, f"  epoch {epoch}: loss={losses['total']:.4f} feat_std={stats['mean_per_dim_std']:.3g}")

    paths = run_sweep(text, args.grid, out, extra, progress)
    for p in paths:
        _say(args, f"wrote {p}")
    return 0


# --- inspect --------------------------------------------------------------------

def cmd_inspect(args):
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == checkpoint.MAGIC:
        tensors, meta = checkpoint.load(args.path)
        print(f"checkpoint {args.path}: method={meta.get('method')} epoch={meta.get('epoch')} "
              f"step={meta.get('step')} seed={meta.get('seed')}")
        if meta.get("config"):
            print("config:")
            print("".join(f"  {line}\n" for line in meta["config"].splitlines()), end="")
        total = 0
        for name, arr in tensors.items():
            if name.startswith("net."):
                total += arr.size
            if args.tensors:
                print(f"  {name:<48} {str(arr.dtype):<8} {'x'.join(map(str, arr.shape)) or 'scalar'}")
        print(f"{len(tensors)} tensors; student parameters and buffers: {total:,} values")
    elif magic == STORE_MAGIC:
        store = TeacherStore(args.path)
        dims = ", ".join(f"{h}x{w}x{c}" for h, w, c in store.stage_dims) or "none (CLS only)"
        print(f"teacher store {args.path}: {len(store)} records, cls_dim={store.cls_dim}, stages: {dims}")
    else:
        raise checkpoint.CheckpointError(f"{args.path}: unrecognised file (magic {magic!r})")
    return 0


# --- parser ---------------------------------------------------------------------

def _config_args(p, required=False):
    p.add_argument("--config", required=required, help="key = value config file (see keys below)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = help_text()
    parser = argparse.ArgumentParser(prog="tinyssl", description=__doc__, formatter_class=fmt, epilog=epilog)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_, func, parent=sub):
        p = parent.add_parser(name, help=help_, description=help_, formatter_class=fmt, epilog=epilog)
        p.set_defaults(func=func)
        p.add_argument("--quiet", action="store_true", help="print nothing but errors")
        return p

    p = add("pretrain", "pretrain a student; writes metrics.csv and checkpoint.tdck", cmd_pretrain)
    _config_args(p)
    p.add_argument("--resume", help="continue from a training checkpoint")

    p = add("probe", "linear-probe a frozen backbone; appends to results.csv", cmd_probe)
    p.add_argument("--checkpoint", help="training checkpoint to evaluate")
    p.add_argument("--random-init", action="store_true", help="probe a freshly initialised backbone instead")
    _config_args(p)
    p.add_argument("--tag", help="row label in results.csv")
    p.add_argument("--knn", type=int, default=0, metavar="K", help="also report leave-one-out K-NN accuracy")
    p.add_argument("--output-dir", help="directory for results.csv (default: the config's output_dir)")

    p = add("budget", "parameter, optimiser-state and INT8 size report", cmd_budget)
    p.add_argument("--alpha", type=float, default=0.35, help="width multiplier")
    p.add_argument("--head", default="all", choices=("all", "capacity_proportional_linear", "seed_mlp"))
    p.add_argument("--overhead", type=int, default=0, help="INT8 metadata bytes added to the flash size")
    p.add_argument("--platform", action="append", default=[], metavar="NAME:FLASH_KIB:SRAM_KIB",
                   help="deployment target; repeatable (default: built-in list)")
    p.add_argument("--csv", action="store_true", help="print CSV instead of the aligned table")
    p.add_argument("--output-dir", default="out", help="directory for report.txt and budget.csv")

    teacher = sub.add_parser("teacher", help="teacher feature stores")
    tsub = teacher.add_subparsers(dest="action", metavar="action")
    tsub.required = True
    p = add("synth", "write a synthetic frozen-teacher store for the configured dataset", cmd_teacher_synth, tsub)
    _config_args(p)
    p.add_argument("--seed", type=int, help="teacher seed (default: teacher.synth_seed)")
    p.add_argument("--cls-only", action="store_true", help="store CLS embeddings only (disables the multi-scale term)")
    p.add_argument("--output", help="store path (default: output_dir/teacher.tfst)")

    data = sub.add_parser("data", help="datasets")
    dsub = data.add_subparsers(dest="action", metavar="action")
    dsub.required = True
    p = add("synth", "write the synthetic shapes dataset as a CIFAR binary file", cmd_data_synth, dsub)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=("cifar10", "cifar100"), default="cifar100")
    p.add_argument("--output", required=True)

    p = add("gradcheck", "finite-difference gradient suites for every kernel and loss", cmd_gradcheck)
    p.add_argument("--shapes", type=int, default=20, help="random shapes per suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", action="append", default=[], help="run only this suite; repeatable")
    p.add_argument("--tol", type=float, default=1e-6, help="maximum relative error")

    p = add("sweep", "run a hyperparameter grid; one metrics CSV per cell", cmd_sweep)
    p.add_argument("--grid", required=True, choices=sorted(SWEEP_GRIDS))
    _config_args(p)
    p.add_argument("--output-dir", help="sweep directory (default: the config's output_dir)")

    p = add("inspect", "summarise a checkpoint or teacher store", cmd_inspect)
    p.add_argument("path")
    p.add_argument("--tensors", action="store_true", help="list every stored tensor")
    return parser


RUNTIME_ERRORS = (TrainingError, checkpoint.CheckpointError, StoreFormatError, DataFormatError,
                  ContractError, ShapeError, OSError, KeyError)


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except RUNTIME_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"tinyssl {args.command}: {msg}", file=sys.stderr)
        return 1
    except (ConfigError, UsageError, ValueError) as e:
        print(f"tinyssl {args.command}: error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
