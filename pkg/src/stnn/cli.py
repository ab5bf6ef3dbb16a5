"""Command line: ``stnn simulate | train | evaluate | predict | explain``.

Failures exit nonzero with one JSON line on stderr:
``{"error": "<ExceptionType>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import io, sim
from .context import DUMMY, build_local_spacetime, estimate_theta, gaussian_connectivity
from .model import ModelConfig, STNNModel, extract_attention
from .training import (Normalizer, TrainConfig, chronological_split, evaluate, evaluate_baseline,
                       make_examples, train)


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, 2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    sys.exit(code)


def _horizons(text: str) -> list:
    try:
        steps = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise CLIError(f"--horizon-steps must be comma-separated integers, got {text!r}") from None
    if not steps or steps[0] < 1:
        raise CLIError("--horizon-steps needs positive steps")
    return steps


def _targets(text: str, x) -> list:
    if text == "all":
        return list(x.sensor_ids)
    wanted = [t.strip() for t in text.split(",") if t.strip()]
    unknown = [t for t in wanted if t not in x.sensor_ids]
    if unknown:
        raise CLIError(f"unknown target sensor(s): {','.join(unknown)}")
    return wanted


def _threads() -> int:
    raw = os.environ.get("SF_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise CLIError(f"SF_THREADS must be an integer, got {raw!r}") from None


def _exclude_zero(man) -> bool:
    return man.marks_closures


def cmd_simulate(args):
    net = sim.build_grid(args.rows, args.cols) if args.rows else sim.build_default_grid()
    schedule = sim.default_schedule(net, args.steps, args.seed) if not args.no_closures else sim.ClosureSchedule()
    ds = sim.run(net, schedule, args.steps, args.seed)
    closures = [[net.sensor_ids[s], a, b] for s, a, b in schedule.closures]
    path = io.save_dataset(args.out, f"sim-{net.rows}x{net.cols}-seed{args.seed}", ds.x, ds.q, closures,
                           net.stride, units={"volume": "vehicles/step", "distance": "m"})
    print(path)


def cmd_train(args):
    man = io.read_manifest(args.manifest)
    x, q = io.load_dataset(man)
    horizons = _horizons(args.horizon_steps)
    targets = _targets(args.targets, x)
    tr, va, _ = chronological_split(x.n_steps, 12, max(horizons))
    theta = estimate_theta(q.window(tr.start, len(tr)))
    norm = Normalizer.fit(x, tr)
    cfg = ModelConfig(alpha=args.alpha, T_r=max(horizons), F=x.n_features, seed=args.seed, dtype=args.dtype)
    conn = gaussian_connectivity(q, theta)
    common = dict(theta=theta, alpha=args.alpha, epsilon=args.epsilon, T_r=max(horizons), connectivity=conn)
    train_set = make_examples(x, q, targets, tr, subsample=args.subsample, seed=args.seed, **common)
    val_set = make_examples(x, q, targets, va, **common)
    model = STNNModel(cfg)
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr,
                       train_subsample_ratio=args.subsample, seed=args.seed, normalization=norm)
    log_path = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".log.jsonl")
    train(model, train_set, tcfg, val=val_set, log_path=log_path)
    io.save_checkpoint(args.checkpoint, model, norm, theta, args.epsilon,
                       extra={"dataset": man.name, "horizons": horizons})
    print(args.checkpoint)


def _load(args):
    man = io.read_manifest(args.manifest)
    x, q = io.load_dataset(man)
    model, meta = io.load_checkpoint(args.checkpoint)
    if meta.get("normalizer") is None or meta.get("theta") is None:
        raise CLIError("checkpoint carries no normalisation statistics or bandwidth")
    return man, x, q, model, meta


def cmd_evaluate(args):
    man, x, q, model, meta = _load(args)
    cfg = model.config
    horizons = [h for h in _horizons(args.horizon_steps) if h <= cfg.T_r]
    tr, _, te = chronological_split(x.n_steps, cfg.T_h, cfg.T_r)
    examples = make_examples(x, q, _targets(args.targets, x), te, theta=meta["theta"], alpha=cfg.alpha,
                             epsilon=meta.get("epsilon") or args.epsilon, T_h=cfg.T_h, T_r=cfg.T_r)
    if len(examples) and examples.starts.min() < tr.stop:
        raise CLIError("evaluation window overlaps the training split")
    ez = _exclude_zero(man)
    report = {"dataset": man.name, "split": [te.start, te.stop], "n_examples": len(examples),
              "exclude_zero_truth": ez,
              "stnn": evaluate(model, examples, meta["normalizer"], horizons, ez).to_dict(),
              "baselines": {k: evaluate_baseline(k, examples, horizons, ez).to_dict()
                            for k in ("ha", "persistence")}}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _context(x, q, model, meta, target, start, epsilon):
    cfg = model.config
    xw, qw = x.window(start, cfg.T_h), q.window(start, cfg.T_h)
    ls = build_local_spacetime(xw, qw, target, epsilon, cfg.alpha, theta=meta["theta"])
    norm = meta["normalizer"]
    inp = ls.tensor.copy()
    real = ls.neighbor_set.indices >= 0
    inp[real, 0, :] = norm.normalize(inp[real, 0, :])
    return ls, inp


def cmd_predict(args):
    _, x, q, model, meta = _load(args)
    cfg = model.config
    if x.n_features != cfg.F:
        raise CLIError(f"dataset has {x.n_features} features, model expects {cfg.F}")
    targets = _targets(args.targets, x)
    start = x.n_steps - cfg.T_h if args.start is None else args.start
    if not 0 <= start <= x.n_steps - cfg.T_h:
        raise CLIError(f"--start must lie in [0, {x.n_steps - cfg.T_h}]")
    eps = meta.get("epsilon") or args.epsilon
    norm = meta["normalizer"]

    def one(target):
        _, inp = _context(x, q, model, meta, target, start, eps)
        return norm.denormalize(model.predict(inp[None])[0])

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        preds = list(pool.map(one, targets))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["target", *[f"t+{h}" for h in range(1, cfg.T_r + 1)]])
        for target, p in zip(targets, preds):
            w.writerow([target, *(repr(float(v)) for v in p)])
    finally:
        if args.out:
            out.close()


def cmd_explain(args):
    _, x, q, model, meta = _load(args)
    cfg = model.config
    targets = _targets(args.targets, x)
    if len(targets) != 1:
        raise CLIError("explain needs exactly one target")
    start = x.n_steps - cfg.T_h if args.start is None else args.start
    ls, inp = _context(x, q, model, meta, targets[0], start, meta.get("epsilon") or args.epsilon)
    amap = extract_attention(model, inp)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["sensor", *[f"t{t}" for t in range(cfg.T_h)]])
        for member, row in zip(ls.neighbor_set.members, amap):
            w.writerow(["dummy" if member is DUMMY else member, *(repr(float(v)) for v in row)])
    finally:
        if args.out:
            out.close()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stnn", description="Local-spacetime traffic forecasting")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a dynamic-network dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--rows", type=int, default=0)
    s.add_argument("--cols", type=int, default=0)
    s.add_argument("--no-closures", action="store_true")
    s.set_defaults(func=cmd_simulate)

    def common(sp, ckpt_required=True):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--checkpoint", required=ckpt_required)
        sp.add_argument("--targets", default="all")
        sp.add_argument("--epsilon", type=float, default=0.1)
        sp.add_argument("--horizon-steps", default="3,6,12")
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--out")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    common(t)
    t.add_argument("--alpha", type=int, default=15)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch-size", type=int, default=80)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--subsample", type=float, default=0.2)
    t.add_argument("--dtype", choices=("float64", "float32"), default="float32")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "test-split metrics with baselines"),
                                 ("predict", cmd_predict, "forecast the next T_r steps per target"),
                                 ("explain", cmd_explain, "attention map of one target as CSV")):
        c = sub.add_parser(name, help=helptext)
        common(c)
        if name != "evaluate":
            c.add_argument("--start", type=int, default=None, help="first step of the input window")
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # one machine-readable line per failure
        _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
