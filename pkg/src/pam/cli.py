"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import accounting, checks
from .backbone import (BackboneConfig, CheckpointError, PamOptions, PlacementPlan, build_model,
                       load_checkpoint, parse_placement)
from .blocks import GateConfig, soft_gates
from .config import ConfigError, RunConfig, dump_config, read_config
from .harness.data import generate_dataset
from .harness.evaluate import BUCKET_NAMES, evaluate_pairs, make_pairs
from .harness.train import TrainingDiverged, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
CONFIG_ECHO = "config.ini"


class UsageError(Exception):
    pass


def fmt(x: float) -> str:
    """Every printed real number goes through here."""
    return f"{x:.12g}"


def _profile(name: str) -> BackboneConfig:
    return BackboneConfig.reference() if name == "reference" else BackboneConfig.toy()


def _plans(texts) -> list[PlacementPlan]:
    try:
        return [parse_placement(t) for t in texts]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# params / compare


def cmd_params(args) -> int:
    cfg = _profile(args.profile)
    opts = PamOptions(conv=args.conv, dream=args.dream)
    base = accounting.CostReport("baseline", [])
    others = [accounting.placement_report(plan, cfg, opts) for plan in _plans(args.plans)
              if plan.stages_with_pam or opts.dream]
    rows = accounting.compare([base, *others]) if others else accounting.compare([base, base])[:1]
    print(accounting.render_records(rows) if args.format == "records" else accounting.render_table(rows))
    if args.trunk:
        model = build_model(cfg, PlacementPlan(), 0, PamOptions(), initialize=False, dtype=np.float32)
        print(f"trunk_params={accounting.count_params(model)}")
    if args.check_paper:
        bad = 0
        for name, expected, counted in accounting.check_published():
            ok = expected == counted
            bad += not ok
            print(f"check {name} expected={expected} counted={counted} {'ok' if ok else 'MISMATCH'}")
        if bad:
            print(f"{bad} published parameter counts not reproduced", file=sys.stderr)
            return EXIT_FAIL
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _profile(args.profile)
    a_name, b_name = args.left, args.right
    reps = {}
    for name in (a_name, b_name):
        if name == "DREAM":
            reps[name] = accounting.placement_report(PlacementPlan(), cfg, PamOptions(dream=True))
        else:
            (plan,) = _plans([name])
            reps[name] = accounting.placement_report(plan, cfg)
    base = accounting.CostReport("baseline", [])
    rows = accounting.compare([base, reps[a_name], reps[b_name]])
    print(accounting.render_records(rows) if args.format == "records" else accounting.render_table(rows))
    if reps[a_name].params == 0:
        raise UsageError(f"{a_name} adds no parameters; ratio undefined")
    print(f"ratio {b_name}/{a_name} params = {fmt(reps[b_name].params / reps[a_name].params)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gate-curve


def gate_curve(k: float, step: float) -> tuple[np.ndarray, np.ndarray]:
    n = int(round(90.0 / step))
    if not np.isclose(n * step, 90.0, rtol=0, atol=1e-9):
        n = int(np.floor(90.0 / step))
    half = np.arange(n + 1) * step
    yaws = np.concatenate([-half[:0:-1], half])
    return yaws, soft_gates(yaws, GateConfig(k_slope=k))


def cmd_gate_curve(args) -> int:
    if not args.step > 0:
        raise UsageError("--step must be positive")
    if not args.k > 0:
        raise UsageError("--k must be positive")
    yaws, vals = gate_curve(args.k, args.step)
    try:
        fh = open(args.out, "w", newline="") if args.out != "-" else sys.stdout
    except OSError as exc:
        print(f"gate-curve: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAIL
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("yaw", "coefficient"))
    for y, v in zip(yaws, vals):
        w.writerow((fmt(y), fmt(v)))
    if fh is not sys.stdout:
        fh.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    try:
        checks.resolve(args.target)
    except KeyError:
        names = sorted({**checks.PRIMITIVES, **checks.BLOCKS, **checks.LOSSES})
        raise UsageError(f"unknown target {args.target!r}; choose from all, primitive, block, loss, "
                         f"cam, " + ", ".join(names))
    seeds = range(args.seed, args.seed + args.seeds)
    worst = 0.0
    for name, groups in checks.run(args.target, seeds).items():
        for group, err in groups.items():
            worst = max(worst, err)
            flag = "ok" if err <= checks.TOLERANCE else "FAIL"
            print(f"{name} {group} max_rel_err={fmt(err)} {flag}")
    ok = worst <= checks.TOLERANCE
    print(f"overall max_rel_err={fmt(worst)} tolerance={fmt(checks.TOLERANCE)} {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# train / eval


def _datasets(cfg: RunConfig):
    d = cfg.data
    train_set = generate_dataset(d.seed, d.n_identities, d.n_per_identity, d.yaw_law,
                                 cfg.backbone.input_size, cfg.backbone.in_channels, cfg.corruption)
    eval_set = generate_dataset(d.eval_seed, d.eval_identities, d.eval_per_identity, d.eval_yaw_law,
                                cfg.backbone.input_size, cfg.backbone.in_channels, cfg.corruption)
    return train_set, eval_set, make_pairs(eval_set, d.pair_seed)


def _load_config(path) -> RunConfig:
    try:
        return read_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc


def _print_eval(acc: float, buckets: dict) -> None:
    print(f"acc={fmt(acc)}")
    for k in BUCKET_NAMES:
        print(f"{k}={fmt(buckets[k])}")


def cmd_train(args) -> int:
    if args.emit_default:
        text = dump_config(RunConfig())
        if args.config in (None, "-"):
            sys.stdout.write(text)
        else:
            Path(args.config).write_text(text)
        return EXIT_OK
    if args.config is None:
        raise UsageError("train: a config path is required (or --emit-default)")
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(dump_config(cfg))
    train_set, eval_set, pairs = _datasets(cfg)
    model = build_model(cfg.backbone, cfg.model.placement, cfg.model.seed, cfg.pam,
                        dtype=cfg.model.np_dtype)
    result = train(model, train_set, cfg.train, eval_set, pairs, out_dir=out)
    final = result.history[-1]
    print(f"epochs={cfg.train.epochs} loss={fmt(final['loss'])}")
    _print_eval(final["acc"], final)
    print(f"wrote {out / 'checkpoint.npz'} {out / 'metrics.csv'} {out / CONFIG_ECHO}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else ckpt.parent / CONFIG_ECHO
    cfg = _load_config(config_path)
    model, _ = load_checkpoint(ckpt)
    _, eval_set, pairs = _datasets(cfg)
    res = evaluate_pairs(model, eval_set, pairs)
    _print_eval(res.accuracy, res.bucket_accuracy)
    for k in BUCKET_NAMES:
        print(f"count_{k[4:]}={res.bucket_counts[k]}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("params", help="parameter and MAC deltas of placements")
    q.add_argument("plans", nargs="*", default=["PAM12"])
    q.add_argument("--profile", choices=("reference", "toy"), default="reference")
    q.add_argument("--conv", choices=("depthwise", "dense"), default="depthwise")
    q.add_argument("--dream", action="store_true", help="add the embedding-level block")
    q.add_argument("--format", choices=("table", "records"), default="table")
    q.add_argument("--trunk", action="store_true", help="also echo the trunk parameter total")
    q.add_argument("--check-paper", action="store_true",
                   help="assert the published parameter deltas; exit 1 on mismatch")
    q.set_defaults(func=cmd_params)

    q = sub.add_parser("compare", help="parameter ratio of two configurations")
    q.add_argument("left", nargs="?", default="PAM12")
    q.add_argument("right", nargs="?", default="DREAM")
    q.add_argument("--profile", choices=("reference", "toy"), default="reference")
    q.add_argument("--format", choices=("table", "records"), default="table")
    q.set_defaults(func=cmd_compare)

    q = sub.add_parser("gate-curve", help="write the yaw coefficient curve as CSV")
    q.add_argument("--k", type=float, default=10.0)
    q.add_argument("--step", type=float, default=1.0, help="yaw step in degrees")
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_gate_curve)

    q = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    q.add_argument("target", nargs="?", default="all")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    q.set_defaults(func=cmd_gradcheck)

    q = sub.add_parser("train", help="train on synthetic data from a config file")
    q.add_argument("config", nargs="?")
    q.add_argument("--out", help="override [output] dir")
    q.add_argument("--emit-default", action="store_true",
                   help="write the default config to CONFIG (or stdout) and exit")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("eval", help="evaluate a checkpoint on its config's pairs")
    q.add_argument("checkpoint")
    q.add_argument("--config", help=f"defaults to {CONFIG_ECHO} beside the checkpoint")
    q.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"{args.command}: invalid config:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDiverged) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
