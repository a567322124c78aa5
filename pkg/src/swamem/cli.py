"""Command-line front end.

Subcommands:

* ``gradcheck``    -- finite-difference audit of the hand-derived gradients;
                      JSON report, exit 1 on any tolerance breach.
* ``cost``         -- emit the analytic cost CSV (deployment convention).
* ``train-teacher``-- Adam-train a full-attention model on recall data and
                      save the checkpoint.
* ``distill``      -- distill a teacher checkpoint into a windowed hybrid
                      student; writes the student checkpoint + metrics CSV.
* ``eval``         -- far/near recall of a checkpoint under a chosen
                      window/sink/chunk geometry.
* ``bench``        -- instrumented multiply-accumulate counts vs the
                      analytic audit; exit 1 on drift above 2%.

Exit codes: 0 success, 1 a check failed (gradcheck mismatch, bench drift),
2 usage or configuration errors (bad flags, unreadable files, bad config
keys).  ``--config FILE`` reads ``key = value`` lines into the model
configuration; ``--set key=value`` overrides individual fields.  Unknown
keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import costs as costs_mod
from .distill import (
    DistillSpec,
    convert_teacher,
    distill,
    train_teacher,
    train_teacher_curriculum,
)
from .errors import ConfigError, SwamemError
from .memory import MemoryConfig, inner_gradients, init_fast_weights
from .mixer import DESK_CONFIG, Model, ModelConfig, Runtime
from .tasks import gen_task, recall
from .tensor import Tape, count_macs

__all__ = ["main"]


# ----------------------------------------------------------------------
# config plumbing


def _parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _load_config(path: str | None, sets: list[str]) -> ModelConfig:
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    overrides = {}
    if path is not None:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        for ln, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, _, value = line.partition("=")
            overrides[key.strip()] = _parse_value(value)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = _parse_value(value)
    unknown = sorted(set(overrides) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return dataclasses.replace(DESK_CONFIG, **overrides)


def _open_out(path: str | None):
    return open(path, "w") if path and path != "-" else sys.stdout


# ----------------------------------------------------------------------
# gradcheck


def _fd_grad(fn, arrays, idx, h=1e-6):
    flat = arrays[idx]
    grad = np.zeros_like(flat)
    it = np.nditer(flat, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
        it.iternext()
    return grad


def _gradcheck_inner(seed: int) -> float:
    cfg = MemoryConfig(n_heads=1, head_dim=4, hidden=6, chunk_size=8)
    rng = np.random.default_rng(seed)
    init = init_fast_weights(rng, cfg)
    w = [init[name][None] + rng.normal(0, 0.2, size=(1, *init[name].shape))
         for name in ("w_gate", "w_up", "w_down")]
    k = rng.normal(size=(1, 1, 5, 4))
    v = rng.normal(size=(1, 1, 5, 4))
    eta = np.abs(rng.normal(size=(1, 1, 5, 1)))

    from .memory import inner_loss
    from .tensor import constant

    def loss_val():
        ws = tuple(constant(a) for a in w)
        return float(inner_loss(ws, constant(k), constant(v), constant(eta)).data)

    grads = inner_gradients(
        tuple(constant(a) for a in w), constant(k), constant(v), constant(eta), cfg
    )
    worst = 0.0
    for idx in range(3):
        fd = _fd_grad(loss_val, w, idx)
        got = grads[idx].data
        denom = max(np.abs(fd).max(), np.abs(got).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - got).max() / denom))
    return worst


def _gradcheck_model(seed: int) -> float:
    cfg = dataclasses.replace(DESK_CONFIG, n_layers=1)
    model = Model.init(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.vocab, size=(1, 12))
    rt = model.runtime(chunk_size=4)
    names = ["layers.0.mem.alpha", "layers.0.mem.lr_b"]

    def loss_of():
        out = model.logits(ids, rt=rt)
        return float((out**2).mean())

    tape = Tape()
    logits, leaves = model.forward(ids, rt=rt, tape=tape, trainable=names)
    from .tensor import tmean

    tape.backward(tmean(logits * logits))
    worst = 0.0
    for name in names:
        got = tape.grad(leaves[name])
        fd = _fd_grad(loss_of, [model.params[name]], 0, h=1e-5)
        denom = max(np.abs(fd).max(), np.abs(got).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - got).max() / denom))
    return worst


def _cmd_gradcheck(args) -> int:
    tol = args.tol
    checks = []
    for seed in range(args.seeds):
        err = _gradcheck_inner(args.seed + seed)
        checks.append({"name": f"inner_gradients[seed={args.seed + seed}]",
                       "max_rel_err": err, "tol": tol})
    err = _gradcheck_model(args.seed)
    if args.perturb:
        err += args.perturb
    checks.append({"name": "model_bptt[alpha,lr_b]", "max_rel_err": err, "tol": tol})
    for c in checks:
        c["ok"] = bool(c["max_rel_err"] < c["tol"])
    report = {"checks": checks, "ok": all(c["ok"] for c in checks)}
    out = _open_out(args.out)
    json.dump(report, out, indent=2)
    out.write("\n")
    if out is not sys.stdout:
        out.close()
    return 0 if report["ok"] else 1


# ----------------------------------------------------------------------
# cost


def _cmd_cost(args) -> int:
    geometry = costs_mod.STUDY_GEOMETRY if args.scale == "study" else costs_mod.DESK_GEOMETRY
    lengths = tuple(int(x) for x in args.lengths.split(",")) if args.lengths else costs_mod.DEFAULT_LENGTHS
    out = _open_out(args.out)
    costs_mod.emit_cost_csv(
        out,
        geometry,
        lengths=lengths,
        window=args.window,
        sinks=args.sinks,
        ops_per_mac=args.ops_per_mac,
    )
    if out is not sys.stdout:
        out.close()
    return 0


# ----------------------------------------------------------------------
# training commands


def _cmd_train_teacher(args) -> int:
    cfg = _load_config(args.config, args.set)
    model = Model.init(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    if args.curriculum:
        stage_histories = train_teacher_curriculum(
            model, rng, lr=args.lr, target_recall=args.target_recall,
        )
        history = [row for stage in stage_histories for row in stage]
    else:
        history = train_teacher(
            model,
            rng,
            steps=args.steps,
            batch=args.batch,
            length=args.length,
            lr=args.lr,
            target_recall=args.target_recall,
        )
    model.save(args.out)
    final = history[-1] if history else {}
    print(f"saved {args.out}; steps={final.get('step', 0)} "
          f"loss={final.get('loss', float('nan')):.4f} recall={final.get('recall', 0.0):.3f}")
    return 0


def _cmd_distill(args) -> int:
    teacher = Model.load(args.teacher)
    student = convert_teacher(teacher, seed=args.seed)
    spec = DistillSpec(
        steps=args.steps,
        batch=args.batch,
        length=args.length,
        lr=args.lr,
        rule=args.rule,
        eval_every=args.eval_every,
        warm_start=not args.no_warm_start,
    )
    result = distill(teacher, student, spec, np.random.default_rng(args.seed))
    student.save(args.out)
    if args.metrics:
        with open(args.metrics, "w") as fh:
            fh.write(result.metrics_csv())
    if result.frozen_hash_before != result.frozen_hash_after:
        print("frozen parameters moved during distillation", file=sys.stderr)
        return 1
    print(f"saved {args.out}; far_recall={result.final_far_recall:.3f} "
          f"near_recall={result.final_near_recall:.3f} frozen_hash_ok=True")
    return 0


def _cmd_eval(args) -> int:
    model = Model.load(args.ckpt)
    rt = Runtime(
        attention_mode=args.attention_mode or model.cfg.attention_mode,
        window=args.window if args.window is not None else model.cfg.window,
        sinks=args.sinks if args.sinks is not None else model.cfg.sinks,
        chunk_size=args.chunk_size if args.chunk_size is not None else model.cfg.chunk_size,
        memory_rule=args.rule or model.cfg.memory_rule,
    )
    rng = np.random.default_rng(args.seed)
    far = gen_task("associative_recall", args.batch, args.length, rng,
                   placement="far", n_pairs=args.n_pairs)
    near = gen_task("associative_recall", args.batch, args.length, rng,
                    placement="near", n_pairs=args.n_pairs)
    far_r, near_r = recall(model, far, rt), recall(model, near, rt)
    print(f"far_recall={far_r:.4f} near_recall={near_r:.4f} "
          f"window={rt.window} sinks={rt.sinks} rule={rt.memory_rule}")
    return 0


# ----------------------------------------------------------------------
# bench


def _cmd_bench(args) -> int:
    cfg = _load_config(args.config, args.set)
    model = Model.init(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    rules = [args.rule] if args.rule else ["ttt", "mamba2", "delta", "none"]
    worst = 0.0
    print("rule     B    L    instrumented      analytic        drift")
    for rule in rules:
        for batch, length in ((1, 24), (2, 48)):
            ids = rng.integers(0, cfg.vocab, size=(batch, length))
            rt = model.runtime(memory_rule=rule)
            with count_macs() as tally:
                model.logits(ids, rt=rt)
            want = costs_mod.expected_forward_macs(cfg, rt, batch, length)
            drift = abs(tally.macs - want) / want
            worst = max(worst, drift)
            print(f"{rule:8s} {batch:<4d} {length:<4d} {tally.macs:<15d} {want:<15d} {drift:.2e}")
    print(f"worst drift {worst:.2e} (tolerance {args.tolerance})")
    return 0 if worst <= args.tolerance else 1


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swamem",
        description="Hybrid windowed-attention + fast-weight memory toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=int, default=3, help="number of inner-gradient draws")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--out", default=None, help="JSON report path (default stdout)")
    g.add_argument("--perturb", type=float, default=0.0,
                   help="add this to one computed error (fault injection for testing)")
    g.set_defaults(func=_cmd_gradcheck)

    c = sub.add_parser("cost", help="emit analytic cost CSV")
    c.add_argument("--scale", choices=("desk", "study"), default="study")
    c.add_argument("--window", type=int, default=4096)
    c.add_argument("--sinks", type=int, default=128)
    c.add_argument("--lengths", default=None, help="comma-separated context lengths")
    c.add_argument("--ops-per-mac", type=int, default=2, choices=(1, 2))
    c.add_argument("--out", default=None)
    c.set_defaults(func=_cmd_cost)

    t = sub.add_parser("train-teacher", help="train a full-attention teacher")
    t.add_argument("--config", default=None, help="key = value file of model fields")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=2500)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--length", type=int, default=96)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--target-recall", type=float, default=0.97)
    t.add_argument("--curriculum", action="store_true",
                   help="train in two stages (short then long sequences); "
                        "stage schedules own steps/batch/length, so those "
                        "flags are ignored")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train_teacher)

    d = sub.add_parser("distill", help="distill a teacher into a hybrid student")
    d.add_argument("--teacher", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--metrics", default=None, help="metrics CSV path")
    d.add_argument("--rule", choices=("ttt", "mamba2", "delta"), default="ttt")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--steps", type=int, default=400)
    d.add_argument("--batch", type=int, default=24)
    d.add_argument("--length", type=int, default=96)
    d.add_argument("--lr", type=float, default=0.05)
    d.add_argument("--eval-every", type=int, default=50)
    d.add_argument("--no-warm-start", action="store_true",
                   help="train straight from the converted initialization")
    d.set_defaults(func=_cmd_distill)

    e = sub.add_parser("eval", help="far/near recall of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--window", type=int, default=None)
    e.add_argument("--sinks", type=int, default=None)
    e.add_argument("--chunk-size", type=int, default=None)
    e.add_argument("--rule", default=None)
    e.add_argument("--attention-mode", default=None)
    e.add_argument("--batch", type=int, default=128)
    e.add_argument("--length", type=int, default=96)
    e.add_argument("--n-pairs", type=int, default=4)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    b = sub.add_parser("bench", help="instrumented vs analytic MAC counts")
    b.add_argument("--config", default=None)
    b.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--rule", default=None, choices=("ttt", "mamba2", "delta", "none"))
    b.add_argument("--tolerance", type=float, default=0.02)
    b.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SwamemError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
