"""Batch command-line surface: morphology generation, training, diversion,
deployment, evaluation, transfer, and SVG learning-curve reports.

Every output file gets a sibling RunManifest (<out>.manifest.json) with the
command, full configuration echo, seeds, paths, wall-clock, and output
checksums.  All randomness derives from --seed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import envs
from .deploy import (
    checkpoint_morphs,
    deploy,
    agent_forward,
    load_agent,
    load_checkpoint,
    save_agent,
    save_checkpoint,
)
from .errors import ContractViolationError, DivMorphError, FormatError
from .specs import dump_morphs, load_morphs
from .training import (
    AdaptConfig,
    DistillConfig,
    PPOConfig,
    adapt,
    divert,
    evaluate,
    make_policy,
    train_teacher,
)

CSV_HEADER = ["phase", "step", "task_id", "morph_id", "metric", "value"]


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, data):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(data)
    os.replace(tmp, path)


def _write_manifest(command, args_ns, outputs, t0):
    args = {k: v for k, v in vars(args_ns).items() if k != "func"}
    manifest = {
        "command": command,
        "config": args,
        "seeds": {"seed": args.get("seed")},
        "inputs": {k: v for k, v in args.items()
                   if isinstance(v, str) and os.path.exists(v) and v not in outputs},
        "outputs": {p: _sha256(p) for p in outputs},
        "wall_clock_s": time.time() - t0,
    }
    for out in outputs:
        _atomic_write(out + ".manifest.json",
                      json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _write_csv(path, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for phase, step, task_id, morph_id, metric, value in rows:
            w.writerow([phase, step, task_id, morph_id, metric, repr(float(value))])
    os.replace(tmp, path)


def _task(task_id):
    if task_id not in envs.TASKS:
        raise ContractViolationError(
            f"unknown task {task_id!r}; known: {sorted(envs.TASKS)}")
    return envs.TASKS[task_id]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_morphs(args):
    t0 = time.time()
    morphs = envs.gen_morphologies(args.seed, args.count)
    dump_morphs(morphs, args.out)
    _write_manifest("gen-morphs", args, [args.out], t0)


def cmd_train_teacher(args):
    t0 = time.time()
    task = _task(args.task)
    morphs = load_morphs(args.morphs)
    log = []
    ctl = train_teacher(task, morphs, PPOConfig(), args.seed, args.steps, log=log)
    save_checkpoint(ctl, args.out, morphs=morphs,
                    extra={"task_id": task.id, "seed": args.seed})
    outputs = [args.out]
    if args.csv:
        _write_csv(args.csv, log)
        outputs.append(args.csv)
    _write_manifest("train-teacher", args, outputs, t0)


def cmd_divert(args):
    t0 = time.time()
    teachers = {}
    for part in args.teachers.split(","):
        if "=" not in part:
            raise ContractViolationError("--teachers expects id=path,...")
        tid, path = part.split("=", 1)
        _task(tid)
        ctl, _ = load_checkpoint(path)
        if ctl.factorized:
            raise ContractViolationError(f"teacher {tid} must be a dense checkpoint")
        teachers[tid] = ctl
    morphs = load_morphs(args.morphs)
    log = []
    dcfg = DistillConfig(budget=args.steps)
    student = divert(teachers, morphs, dcfg, args.seed, profile=args.profile, log=log)
    save_checkpoint(student, args.out, morphs=morphs,
                    extra={"profile": args.profile, "seed": args.seed})
    outputs = [args.out]
    if args.csv:
        _write_csv(args.csv, log)
        outputs.append(args.csv)
    _write_manifest("divert", args, outputs, t0)


def cmd_deploy(args):
    t0 = time.time()
    task = _task(args.task)
    morphs = {m.id: m for m in load_morphs(args.morphs)}
    if args.morph_id not in morphs:
        raise ContractViolationError(f"morph id {args.morph_id!r} not in {args.morphs}")
    ctl, _ = load_checkpoint(args.ckpt)
    agent = deploy(ctl, morphs[args.morph_id], task)
    save_agent(agent, args.out)
    _write_manifest("deploy", args, [args.out], t0)


def cmd_eval(args):
    t0 = time.time()
    task = _task(args.task)
    morphs = load_morphs(args.morphs)
    if args.agent:
        agent = load_agent(args.agent)
        if agent.task_id != task.id:
            raise ContractViolationError(
                f"agent was deployed for task {agent.task_id!r}, not {task.id!r}")
        by_id = {m.id: m for m in morphs}
        if agent.morph_id not in by_id:
            raise ContractViolationError(
                f"agent morph {agent.morph_id!r} not in {args.morphs}")
        morphs = [by_id[agent.morph_id]]

        def policy(morph, obs, gobs):
            return agent_forward(agent, obs, gobs), 0.0
    else:
        ctl, _ = load_checkpoint(args.ckpt)
        policy = make_policy(ctl, task)
    results = evaluate(policy, morphs, task, args.episodes, args.seed)
    rows = [("eval", e % args.episodes, task.id, mid, "return", ret)
            for e, (mid, ret) in enumerate(results)]
    _write_csv(args.csv, rows)
    _write_manifest("eval", args, [args.csv], t0)


def cmd_transfer(args):
    t0 = time.time()
    task = _task(args.task)
    ctl, manifest = load_checkpoint(args.ckpt)
    morphs = checkpoint_morphs(manifest)
    if not morphs:
        raise ContractViolationError("checkpoint carries no morphology set")
    mode = args.mode.replace("-", "_")
    log = []
    out = adapt(ctl, task, mode, AdaptConfig(), args.steps, args.seed, morphs, log=log)
    save_checkpoint(out, args.out, morphs=morphs,
                    extra={"adapted_task": task.id, "mode": mode, "seed": args.seed})
    _write_csv(args.csv, log)
    _write_manifest("transfer", args, [args.out, args.csv], t0)


def cmd_report(args):
    t0 = time.time()
    series = {}
    for path in args.csv.split(","):
        label = os.path.splitext(os.path.basename(path))[0]
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r, None)
            if header != CSV_HEADER:
                raise FormatError(f"{path}: unexpected CSV header {header}")
            for phase, step, task_id, morph_id, metric, value in r:
                if metric != args.metric:
                    continue
                series.setdefault((label, task_id), []).append(
                    (float(step), float(value)))
    svg = render_svg(series, args.metric)
    _atomic_write(args.out, svg)
    _write_manifest("report", args, [args.out], t0)


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf"]


def render_svg(series, metric, width=720, height=420):
    """Minimal hand-rolled line chart: axes, one polyline per series, legend."""
    ml, mr, mt, mb = 60, 20, 20, 45
    pts_all = [p for pts in series.values() for p in pts]
    if not pts_all:
        xs = (0.0, 1.0)
        ys = (0.0, 1.0)
    else:
        xv = [p[0] for p in pts_all]
        yv = [p[1] for p in pts_all]
        xs = (min(xv), max(xv) or 1.0)
        ys = (min(yv), max(yv))
    if xs[0] == xs[1]:
        xs = (xs[0] - 1, xs[1] + 1)
    if ys[0] == ys[1]:
        ys = (ys[0] - 1, ys[1] + 1)

    def sx(x):
        return ml + (x - xs[0]) / (xs[1] - xs[0]) * (width - ml - mr)

    def sy(y):
        return height - mb - (y - ys[0]) / (ys[1] - ys[0]) * (height - mt - mb)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        xval = xs[0] + frac * (xs[1] - xs[0])
        yval = ys[0] + frac * (ys[1] - ys[0])
        out.append(f'<text x="{sx(xval):.1f}" y="{height - mb + 18}" font-size="11" '
                   f'text-anchor="middle">{xval:g}</text>')
        out.append(f'<text x="{ml - 6}" y="{sy(yval):.1f}" font-size="11" '
                   f'text-anchor="end">{yval:.3g}</text>')
    out.append(f'<text x="{(ml + width - mr) / 2}" y="{height - 8}" font-size="12" '
               f'text-anchor="middle">step</text>')
    out.append(f'<text x="14" y="{(mt + height - mb) / 2}" font-size="12" '
               f'text-anchor="middle" transform="rotate(-90 14 {(mt + height - mb) / 2})">'
               f'{metric}</text>')
    for i, (key, pts) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{width - mr - 150}" y="{mt + 14 + 14 * i}" font-size="11" '
                   f'fill="{color}">{key[0]}:{key[1]}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="divmorph", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-morphs", help="generate a procedural morphology set")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_morphs)

    t = sub.add_parser("train-teacher", help="PPO-train a dense per-task teacher")
    t.add_argument("--task", required=True)
    t.add_argument("--morphs", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--csv")
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("divert", help="distill teachers into a factorized student")
    d.add_argument("--teachers", required=True, metavar="id=path,...")
    d.add_argument("--morphs", required=True)
    d.add_argument("--profile", choices=["fidelity", "compact"], required=True)
    d.add_argument("--steps", type=int, required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--csv")
    d.set_defaults(func=cmd_divert)

    dep = sub.add_parser("deploy", help="prune and package one agent")
    dep.add_argument("--ckpt", required=True)
    dep.add_argument("--morph-id", required=True)
    dep.add_argument("--morphs", required=True)
    dep.add_argument("--task", required=True)
    dep.add_argument("--out", required=True)
    dep.set_defaults(func=cmd_deploy)

    e = sub.add_parser("eval", help="evaluate an agent or checkpoint")
    grp = e.add_mutually_exclusive_group(required=True)
    grp.add_argument("--agent")
    grp.add_argument("--ckpt")
    e.add_argument("--task", required=True)
    e.add_argument("--morphs", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--csv", required=True)
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("transfer", help="zero-shot or finetune on a new task")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--task", required=True)
    tr.add_argument("--mode", choices=["zero-shot", "finetune"], required=True)
    tr.add_argument("--steps", type=int, required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--csv", required=True)
    tr.set_defaults(func=cmd_transfer)

    r = sub.add_parser("report", help="render CSV metrics to an SVG line chart")
    r.add_argument("--csv", required=True, metavar="path,...")
    r.add_argument("--out", required=True)
    r.add_argument("--metric", default="mean_return")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivMorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
