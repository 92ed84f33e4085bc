"""Command-line entry point: ``ttcomp <subcommand> [options]``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bank import BankFormatError, build_bank, impute_zeros, load_bank, save_bank
from .compformer import CheckpointError
from .evaluation import bench_attention, stratified_report
from .extremeness import adjacent_ppmcc_profile, score_windows, stratify
from .forecaster import Forecaster, TrainingDivergedError, predict, split_config, train
from .ingest import (
    ConfigError,
    ParseError,
    SplitSpec,
    SyntheticSpec,
    all_zero_fraction,
    all_zero_window_fraction,
    from_epoch_minutes,
    generate_synthetic,
    load_csv,
    save_csv,
    split,
)
from .series import AlignmentError, InsufficientDataError

log = logging.getLogger("ttcomp")

VALIDATION_ERRORS = (ConfigError, ParseError, AlignmentError, InsufficientDataError, BankFormatError, CheckpointError, ValueError, FileNotFoundError)


def _read_config(args) -> dict:
    if not args.config:
        return {}
    data = json.loads(Path(args.config).read_text())
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _out(args, name: str) -> Path:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_generate(args) -> int:
    data = _read_config(args)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = SyntheticSpec.from_dict(data)
    frame = generate_synthetic(spec)
    path = Path(args.out) if args.out else _out(args, "synthetic.csv")
    save_csv(frame, path)
    print(f"wrote {path}: T={frame.T} C={frame.C}")
    print(f"all-zero steps {100 * all_zero_fraction(frame):.3f}%  windows with an all-zero step {100 * all_zero_window_fraction(frame):.3f}%")
    return 0


def _train_bank(train_frame):
    return build_bank(impute_zeros(train_frame))


def cmd_build_bank(args) -> int:
    frame = load_csv(args.input)
    if args.split:
        frame = split(frame, SplitSpec())[0]
    bank = _train_bank(frame)
    out = Path(args.out) if args.out else _out(args, "bank.cpbk")
    save_bank(bank, out)
    q = bank.Q
    print(f"wrote {out}: P={bank.P} C={bank.C} records={int(q.sum())} Q min/median/max={q.min()}/{int(np.median(q))}/{q.max()}")
    return 0


def cmd_inspect_bank(args) -> int:
    bank = load_bank(args.bank)
    if not 0 <= args.slot < bank.P:
        raise ConfigError(f"slot must lie in [0, {bank.P})")
    ts, vals = bank.slot(args.slot)
    print(f"slot {args.slot}: Q={len(ts)}")
    if len(ts):
        print("timestamps: " + ", ".join(from_epoch_minutes(t) for t in ts))
        print("sensor  mean      std")
        for c, (m, s) in enumerate(zip(vals.mean(axis=0), vals.std(axis=0))):
            print(f"{c:>6}  {m:8.3f}  {s:7.3f}")
    return 0


def cmd_train(args) -> int:
    frame = load_csv(args.input)
    data = _read_config(args)
    model_cfg, train_cfg = split_config(data)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.control:
        model_cfg = replace(model_cfg, compensate=False)
    tr, va, _ = split(frame, SplitSpec())
    bank = _train_bank(tr)
    result = train(tr, va, bank, model_cfg, train_cfg)
    name = args.name or ("control" if args.control else "model")
    ckpt = _out(args, f"{name}.cpfm")
    result.model.save(ckpt)
    trace = _out(args, f"{name}_loss.csv")
    _write_csv(trace, ["epoch", "train_mae", "val_mae"], [(r["epoch"], r["train_mae"], r["val_mae"]) for r in result.trace])
    print("epoch  train_mae  val_mae")
    for r in result.trace:
        print(f"{r['epoch']:>5}  {r['train_mae']:9.4f}  {r['val_mae']:7.4f}")
    print(f"best epoch {result.best_epoch} val MAE {result.best_val_mae:.4f}; wrote {ckpt} and {trace}")
    return 0


def cmd_evaluate(args) -> int:
    frame = load_csv(args.input)
    tr, _, te = split(frame, SplitSpec())
    bank = load_bank(args.bank) if args.bank else _train_bank(tr)
    model = Forecaster.load(args.checkpoint)
    if bank.C != frame.C:
        raise ConfigError(f"bank has {bank.C} sensors, dataset has {frame.C}")
    seed = 12345 if args.seed is None else args.seed
    res = predict(te, bank, model, seed)
    ctrl = None
    if args.control:
        ctrl = predict(te, bank, Forecaster.load(args.control), seed).predictions
    report = stratified_report(res.predictions, res.targets, res.scores, args.buckets, ctrl)
    path = _out(args, "report.json")
    path.write_text(report.to_json())
    print(report.format_table())
    print(f"\nwrote {path}")
    return 0


def cmd_extremeness(args) -> int:
    frame = load_csv(args.input)
    L = args.L
    if frame.T < L:
        raise InsufficientDataError(f"T={frame.T} < L={L}")
    x = np.lib.stride_tricks.sliding_window_view(frame.values, L, axis=0).transpose(0, 2, 1)
    origins = np.arange(len(x)) + L - 1
    scores = score_windows(x, origins)
    bz, be = stratify(scores, args.buckets)
    path = _out(args, "extremeness.csv")
    _write_csv(path, ["origin_t", "zero_count", "entropy", "bucket_zero", "bucket_entropy"], [(s.origin_t, s.zero_count, f"{s.entropy:.6f}", int(a), int(b)) for s, a, b in zip(scores, bz, be)])
    rho, defined = adjacent_ppmcc_profile(frame)
    ppath = _out(args, "ppmcc.csv")
    _write_csv(ppath, ["t", "timestamp", "rho", "defined"], [(t + 1, from_epoch_minutes(frame.timestamps[t + 1]), "" if not d else f"{r:.6f}", int(d)) for t, (r, d) in enumerate(zip(rho, defined))])
    z = np.array([s.zero_count for s in scores])
    e = np.array([s.entropy for s in scores])
    print(f"windows {len(scores)}  zero count median {np.median(z):.0f} p99 {np.percentile(z, 99):.0f} max {z.max()}")
    print(f"entropy median {np.median(e):.3f} min {e.min():.3f} max {e.max():.3f}")
    print(f"adjacent PPMCC mean {np.nanmean(rho):.4f} ({int((~defined).sum())} undefined)")
    print(f"wrote {path} and {ppath}")
    return 0


def cmd_bench(args) -> int:
    data = _read_config(args)
    kwargs = dict(C=data.get("C", args.C), R=data.get("R", args.R), L_sweep=tuple(data.get("L_sweep", args.L)), repetitions=data.get("repetitions", args.repetitions))
    report = bench_attention(**kwargs, seed=0 if args.seed is None else args.seed)
    path = _out(args, "bench.json")
    path.write_text(report.to_json())
    print(report.format_table())
    print(f"\nwrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default="out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ttcomp", description="Bank-compensated traffic forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset CSV")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-bank", parents=[common], help="impute a training CSV and write a bank file")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--split", action="store_true", help="input is a full dataset; keep only its training split")
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("inspect-bank", parents=[common], help="print one slot of a bank file")
    p.add_argument("--bank", default="out/bank.cpbk")
    p.add_argument("--slot", type=int, required=True)
    p.set_defaults(func=cmd_inspect_bank)

    p = sub.add_parser("train", parents=[common], help="train a forecaster on a dataset CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--control", action="store_true", help="train the zero-compensation control")
    p.add_argument("--name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="stratified metrics on the test split")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--control", help="control checkpoint for the loss-gap columns")
    p.add_argument("--bank")
    p.add_argument("--buckets", type=int, default=4)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extremeness", parents=[common], help="per-window zero count / entropy and PPMCC profile CSVs")
    p.add_argument("--input", required=True)
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--buckets", type=int, default=4)
    p.set_defaults(func=cmd_extremeness)

    p = sub.add_parser("bench", parents=[common], help="attention complexity benchmark")
    p.add_argument("--C", type=int, default=50)
    p.add_argument("--R", type=int, default=5)
    p.add_argument("--L", type=int, nargs="+", default=[12, 24, 48])
    p.add_argument("--repetitions", type=int, default=15)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
