"""Command-line entry point: ``python3 -m lpforge <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import model as mdl
from ..concentration import AdaptPolicy, select_q
from ..training import default_eval_attacks, detect_co, evaluate, stream, train
from . import verify as vf
from .data import DatasetError, load_idx, make_synthetic, read_dataset, write_dataset
from .io import (ConfigError, RunManifest, load_config, load_dataset, nan_to_none, read_records_csv,
                 timestamp, write_records_csv)
from .plot import records_svg

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lpforge", description="l^p adversarial training toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--abort-on-co", action="store_true", help="exit 1 if catastrophic overfitting is detected")

    a = sub.add_parser("attack", help="robust accuracy of a checkpoint")
    a.add_argument("--checkpoint", required=True)
    _data_args(a)
    a.add_argument("--eps-linf", type=float, default=8 / 255)
    a.add_argument("--eps-l2", type=float, default=None)
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--restarts", type=int, default=2)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="-")

    m = sub.add_parser("metrics", help="concentration report per gradient (JSON lines)")
    m.add_argument("--grads", help=".npy gradient dump, shape (d,) or (N, d)")
    m.add_argument("--checkpoint")
    _data_args(m, required=False)
    m.add_argument("--limit", type=int, default=256, help="max samples from the dataset")
    m.add_argument("--beta", type=float, default=0.01)
    m.add_argument("--alpha", type=float, default=None)
    m.add_argument("--out", default="-")

    v = sub.add_parser("verify", help="run oracle suites")
    v.add_argument("--suite", action="append", choices=list(vf.SUITES), help="repeatable; default all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--list", action="store_true")

    d = sub.add_parser("dataset", help="write a synthetic dataset (LPDS01)")
    d.add_argument("--kind", required=True, choices=["gauss_blobs", "two_spirals", "sparse_signal"])
    d.add_argument("--d", type=int, default=64)
    d.add_argument("--classes", type=int, default=2)
    d.add_argument("--n-per-class", type=int, default=200)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--k", type=int, default=4)
    d.add_argument("--separation", type=float, default=4.0)
    d.add_argument("--noise", type=float, default=1.0)
    d.add_argument("--background", type=float, default=1.0)
    d.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="records CSV to SVG")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--d", type=int, default=None, help="input dimension, to plot pr1/d")
    pl.add_argument("--out", required=True)
    return ap


def _data_args(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--data", help="LPDS01 dataset file")
    g.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"))


def _load_data(args):
    if args.data:
        if not Path(args.data).is_file():
            raise UsageError(f"dataset file not found: {args.data}")
        return read_dataset(args.data)
    for f in args.idx:
        if not Path(f).is_file():
            raise UsageError(f"IDX file not found: {f}")
    return load_idx(*args.idx)


def _emit(text: str, out: str) -> None:
    if out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_train(args) -> int:
    run = load_config(args.config)
    base = Path(args.config).resolve().parent
    ds = load_dataset(run.dataset, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=run.raw, seed=run.train.seed, started=timestamp())
    params, records = train(run.train, ds)
    csv_path, ckpt_path = out / "records.csv", out / "model.ckpt"
    write_records_csv(records, csv_path)
    mdl.save_checkpoint(params, ckpt_path)
    manifest.add_output("records", csv_path)
    manifest.add_output("checkpoint", ckpt_path)
    manifest.add_output("manifest", out / "manifest.json")
    manifest.finished = timestamp()
    manifest.write(out / "manifest.json")
    last = records[-1]
    print(f"epoch {last.epoch}: clean {last.clean_acc:.3f} fgsm {last.fgsm_acc:.3f} "
          f"pgd-linf {last.pgd_linf_acc:.3f} pgd-l2 {last.pgd_l2_acc:.3f}")
    ev = detect_co(records) if len(records) >= 2 else None
    if ev is not None:
        print(f"catastrophic overfitting detected at epoch {ev.epoch_detected} "
              f"(PGD drop {ev.pgd_drop:.3f})")
        if args.abort_on_co:
            return EXIT_FAIL
    return EXIT_OK


def cmd_attack(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params = mdl.load_checkpoint(args.checkpoint)
    ds = _load_data(args)
    x, y = ds.test()
    eps_l2 = 4 * args.eps_linf if args.eps_l2 is None else args.eps_l2
    attacks = default_eval_attacks(args.eps_linf, eps_l2, args.steps, args.restarts, ds.feature_range)
    res = evaluate(params, x, y, attacks, stream(args.seed, "pgd"), args.eps_linf, ds.feature_range)
    _emit(json.dumps(res, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    policy = AdaptPolicy(beta=None, alpha=args.alpha) if args.alpha is not None else AdaptPolicy(beta=args.beta)
    if args.grads:
        if not Path(args.grads).is_file():
            raise UsageError(f"gradient file not found: {args.grads}")
        G = np.atleast_2d(np.load(args.grads))
    elif args.checkpoint and (args.data or args.idx):
        params = mdl.load_checkpoint(args.checkpoint)
        x, y = _load_data(args).test()
        G = mdl.xent_loss_and_grads(params, x[:args.limit], y[:args.limit], need_params=False).input_grads
    else:
        raise UsageError("metrics needs --grads, or --checkpoint with --data/--idx")
    lines = []
    for i, g in enumerate(G):
        if not np.any(g != 0):
            lines.append(json.dumps({"index": i, "error": "zero gradient"}))
            continue
        rep = select_q(g, policy)[3].to_dict()
        lines.append(json.dumps({"index": i, **{k: nan_to_none(v) for k, v in rep.items()}}))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.list:
        print("\n".join(vf.SUITES))
        return EXIT_OK
    results = vf.run_suites(args.suite, args.seed)
    print(vf.format_table(results))
    ok = all(r.passed for r in results)
    print("ALL PASS" if ok else "FAILURES: " + ", ".join(r.name for r in results if not r.passed))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dataset(args) -> int:
    ds = make_synthetic(args.kind, args.d, args.classes, args.n_per_class, args.seed, k=args.k,
                        separation=args.separation, noise=args.noise, background=args.background)
    write_dataset(ds, args.out)
    print(f"wrote {ds.name}: {len(ds.y)} samples, d={ds.d} -> {args.out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    if not Path(args.csv).is_file():
        raise UsageError(f"records file not found: {args.csv}")
    recs = read_records_csv(args.csv)
    Path(args.out).write_text(records_svg(recs, args.d, title=Path(args.csv).name))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "metrics": cmd_metrics, "verify": cmd_verify,
            "dataset": cmd_dataset, "plot": cmd_plot}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError, DatasetError, ValueError) as e:
        print(f"lpforge {args.cmd}: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_cli())
