"""Command-line entry point: synth, extract-flow, train, eval, alp."""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .analysis import alp_report
from .autodiff import DimensionError, NumericError
from .checkpoint import CheckpointError
from .data import DatasetError, SynthConfig, compute_sequence_flow, flow_name, load_dataset, synth_generate
from .flow import FlowField, FlowFormatError, FlowParams, write_flo
from .model import ConfigError, SteeringModel, read_key_values
from .plotting import line_plot
from .training import TrainConfig, TrainingDiverged, evaluate, fold_views, make_folds, save_run, train

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_USAGE, "usage", message, self.format_usage())


def _fail(code, kind, message, extra=""):
    if extra:
        sys.stderr.write(extra)
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": str(message)}) + "\n")
    sys.exit(code)


# ---------------------------------------------------------------------------
# manifest


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def content_hash(paths):
    """Hash of every file under ``paths`` (relative names and bytes, sorted)."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
        for p in files:
            rel = p.name if p == root else p.relative_to(root).as_posix()
            h.update(rel.encode() + b"\0" + _sha256(p).encode())
    return h.hexdigest()


def write_manifest(out, command, config, seed, inputs, outputs, started):
    out = Path(out)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "input_hash": content_hash(inputs),
        "outputs": {Path(p).relative_to(out).as_posix(): _sha256(p) for p in sorted(map(Path, outputs))},
        "seconds": round(time.time() - started, 3),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _require_dir(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_synth(args, out):
    values = {}
    if args.config:
        values.update(read_key_values(args.config))
    for f in fields(SynthConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = {}
    for f in fields(SynthConfig):
        if f.name in values:
            v = values[f.name]
            if f.type is bool:
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                try:
                    v = f.type(v)
                except ValueError:
                    raise UsageError(f"{f.name}: cannot parse {v!r}") from None
            cfg[f.name] = v
    try:
        config = SynthConfig(**cfg)
    except ValueError as err:
        raise UsageError(err) from None
    paths = synth_generate(config, out)
    outputs = [p for d in paths for p in sorted(d.iterdir())]
    return asdict(config), config.seed, [], outputs


def cmd_extract_flow(args, out):
    src = _require_dir(args.input, "--in")
    params = FlowParams(
        levels=args.levels or 3,
        scale=args.scale or 0.5,
        win_size=args.win or 11,
        iterations=args.iters or 3,
    )
    outputs = []
    for seq in load_dataset(src):
        dest = Path(out) / seq.name
        dest.mkdir(parents=True, exist_ok=True)
        flow = compute_sequence_flow(seq.frames, params)
        for t in range(len(flow)):
            p = dest / flow_name(t)
            write_flo(FlowField(flow[t]), p)
            outputs.append(p)
    return asdict(params), None, [src], outputs


def _train_config(args):
    values = read_key_values(args.config) if args.config else {}
    overrides = {
        k: getattr(args, k)
        for k in ("encoder", "head", "fusion", "modality", "steps", "batch", "seq_len", "lr", "alpha", "folds")
        if getattr(args, k, None) is not None
    }
    if args.seed is not None:
        overrides["seed"] = args.seed
    values.update({k: str(v) for k, v in overrides.items()})
    return TrainConfig.from_mapping(values)


def _fold_list(spec, k):
    if spec in (None, "all"):
        return list(range(1, k + 1))
    try:
        folds = [int(s) for s in str(spec).split(",")]
    except ValueError:
        raise UsageError(f"--fold expects 'all' or comma-separated integers, got {spec!r}") from None
    bad = [f for f in folds if not 1 <= f <= k]
    if bad:
        raise UsageError(f"fold(s) {bad} out of range 1..{k}")
    return folds


def _fold_count(text):
    if text == "all":
        return None
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'all', got {text!r}") from None
    if k < 2:
        raise argparse.ArgumentTypeError("need at least 2 folds")
    return k


def _dataset(args):
    data = _require_dir(args.data, "--data")
    seqs = load_dataset(data, args.flow)
    if not seqs:
        raise DatasetError(f"no sequences under {data}")
    inputs = [data] + ([Path(args.flow)] if args.flow else [])
    return seqs, inputs


def cmd_train(args, out):
    config = _train_config(args)
    seqs, inputs = _dataset(args)
    plan = make_folds(len(seqs), config.folds)
    outputs = []
    for fold in _fold_list(args.fold, config.folds):
        tr, va, _ = fold_views(seqs, plan, fold - 1)
        result = train(config, tr, va)
        run_dir = Path(out) / f"fold_{fold:02d}"
        ckpt, curve = save_run(result, run_dir)
        steps = [c[0] for c in result.curve]
        plot = line_plot(
            {"train": [c[1] for c in result.curve], "validation": [c[2] for c in result.curve]},
            run_dir / "curve.svg",
            title=f"Fold {fold}",
            xlabel="step",
            ylabel="MSE",
            x=steps,
        )
        outputs += [ckpt, run_dir / "config.txt", curve, plot]
    (Path(out) / "train_config.txt").write_text(config.to_text())
    outputs.append(Path(out) / "train_config.txt")
    return asdict(config), config.seed, inputs, outputs


def _run_dirs(runs):
    runs = _require_dir(runs, "--runs")
    found = {}
    for d in sorted(runs.glob("fold_*")):
        if (d / "model.ckpt").exists():
            found[int(d.name.split("_")[1])] = d
    if not found:
        raise FileNotFoundError(f"no fold_XX checkpoints under {runs}")
    return runs, found


def cmd_eval(args, out):
    runs, found = _run_dirs(args.runs)
    seqs, inputs = _dataset(args)
    saved = runs / "train_config.txt"
    trained = TrainConfig.from_file(saved) if saved.exists() else TrainConfig()
    k = args.folds or trained.folds
    plan = make_folds(len(seqs), k)
    per_fold = {}
    for fold, d in sorted(found.items()):
        if fold > k:
            raise UsageError(f"checkpoint for fold {fold} but only {k} folds")
        model = SteeringModel.load(d)
        _, _, te = fold_views(seqs, plan, fold - 1)
        res = evaluate(model, te, seq_len=trained.seq_len)
        per_fold[fold] = (res.mse, res.mae, res.labels.size)
    mses = np.array([v[0] for v in per_fold.values()])
    maes = np.array([v[1] for v in per_fold.values()])
    table = Path(out) / "eval.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"fold_{i}" for i in range(1, k + 1)] + ["mse_mean", "mse_std", "mae_mean", "mae_std"])
        row = [repr(per_fold[i][0]) if i in per_fold else "" for i in range(1, k + 1)]
        row += [repr(float(mses.mean())), repr(float(mses.std())), repr(float(maes.mean())), repr(float(maes.std()))]
        w.writerow(row)
    detail = Path(out) / "eval_folds.csv"
    with open(detail, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "mse", "mae", "frames"])
        for fold, (m, a, n) in sorted(per_fold.items()):
            w.writerow([fold, repr(m), repr(a), n])
    return {"folds": k, "runs": str(runs)}, None, inputs + [runs], [table, detail]


def cmd_alp(args, out):
    ckpt = _require_dir(args.checkpoint, "--checkpoint")
    model = SteeringModel.load(ckpt)
    seqs, inputs = _dataset(args)
    k = args.folds or 10
    plan = make_folds(len(seqs), k)
    fold = args.fold or 2
    if not 1 <= fold <= k:
        raise UsageError(f"--fold {fold} out of range 1..{k}")
    te = [seqs[j] for j in plan.folds[fold - 1]]
    report = alp_report(model, te, sigma=args.sigma)
    outputs = report.write(out)
    return {"fold": fold, "sigma": args.sigma, "folds": k}, None, inputs + [ckpt], outputs


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file; flags win")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output root (required)")

    parser = _Parser(prog="flowsteer", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic driving dataset")
    for f in fields(SynthConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type is bool:
            p.add_argument(flag, action="store_true", default=None)
        else:
            p.add_argument(flag, type=f.type)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-flow", parents=[common], help="write .flo companions for a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--levels", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--win", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_extract_flow)

    def data_flags(p):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--flow", help="directory of precomputed .flo companions")
        p.add_argument("--folds", type=_fold_count, help="number of folds, or 'all' for the count used in training")

    p = sub.add_parser("train", parents=[common], help="train one model per fold")
    data_flags(p)
    p.add_argument("--fold", default="all", help="'all' or comma-separated 1-based fold numbers")
    p.add_argument("--encoder", choices=("cnn", "vae"))
    p.add_argument("--head", choices=("ncp", "lstm"))
    p.add_argument("--fusion", choices=("early", "hybrid"))
    p.add_argument("--modality", choices=("none", "flow", "depth"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-fold test MSE/MAE table")
    data_flags(p)
    p.add_argument("--runs", required=True, help="output root of a train run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("alp", parents=[common], help="latent perturbation analysis of a VAE model")
    data_flags(p)
    p.add_argument("--checkpoint", required=True, help="fold directory holding model.ckpt and config.txt")
    p.add_argument("--fold", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.3)
    p.set_defaults(func=cmd_alp)
    return parser


def _limit_threads():
    n = os.environ.get("FLOWSTEER_THREADS")
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise UsageError(f"FLOWSTEER_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if not getattr(args, "command", None):
        parser.error("a subcommand is required")
    if not args.out:
        parser.error("--out is required")
    started = time.time()
    try:
        _limit_threads()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        config, seed, inputs, outputs = args.func(args, out)
        write_manifest(out, args.command, config, seed, inputs, outputs, started)
    except (UsageError, ConfigError) as err:
        _fail(EXIT_USAGE, "usage", err)
    except (FileNotFoundError, DatasetError, CheckpointError, FlowFormatError) as err:
        _fail(EXIT_MISSING, "missing-input", err)
    except (TrainingDiverged, NumericError, FloatingPointError) as err:
        _fail(EXIT_NUMERIC, "numeric", err)
    except DimensionError as err:
        _fail(EXIT_USAGE, "usage", err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
