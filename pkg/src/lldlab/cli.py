"""Command-line driver: gen-tasks, train, probe, eval, export.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import diagnostics as dg
from .core import Vocab
from .env import generate_corpus, generate_tasks, load_tasks, save_tasks
from .policy import load_checkpoint
from .trainer import (TrainConfig, _TASKS, build_lab, evaluate, held_out_tasks, lab_from_files,
                      load_config, rng_for, run_probes, train_loop)

log = logging.getLogger("lldlab")

# export series name -> StepMetrics field
SERIES = {
    "likelihood": "mean_correct_loglik",
    "entropy": "mean_entropy",
    "gradnorm": "grad_norm",
    "reward": "mean_reward",
    "max_ratio": "max_ratio",
    "mean_ratio": "mean_ratio",
    "length": "mean_response_length",
    "valid_search": "mean_valid_search",
    "neg_delta_x": "frac_negative_delta_x",
    "phase": "phase",
    "delta": "mean_correct_delta",
    "lld": "frac_lld",
    "preserving_decrease": "preserving_decrease",
    "obs_match": "obs_match_ratio",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> _Parser:
    p = _Parser(prog="lldlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-tasks", help="write a corpus and task file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entities", type=int, default=16)
    g.add_argument("--tasks", type=int, default=32)
    g.add_argument("--eval-tasks", type=int, default=16)
    g.add_argument("--hops-mix", type=float, default=0.0)
    g.add_argument("--prefix-share", type=float, default=0.0)
    g.add_argument("--vocab-size", type=int, default=64)

    t = sub.add_parser("train", help="run training and write a run directory")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--tasks", help="task file from gen-tasks")
    t.add_argument("--steps", type=int)
    t.add_argument("--lam", type=float)

    pr = sub.add_parser("probe", help="per-query probe at a saved checkpoint")
    pr.add_argument("--run", required=True)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--tasks", type=int, default=50)
    pr.add_argument("--out")
    pr.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="greedy exact match on held-out tasks")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--out")

    x = sub.add_parser("export", help="project metrics.jsonl to CSV")
    x.add_argument("--run", required=True)
    x.add_argument("--what", required=True)
    x.add_argument("--out")
    return p


def _read_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def _run_lab(run: Path):
    cfg = _read_config(str(run / "config.json"))
    tasks_file = run / "tasks.json"
    if tasks_file.exists():
        vocab, corpus, tasks, eval_tasks = load_tasks(tasks_file)
        return cfg, lab_from_files(cfg, vocab, corpus, tasks, eval_tasks)
    return cfg, build_lab(cfg)


def _checkpoint_path(run: Path, name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    stem = name if name.endswith(".json") else f"{name}.json"
    return run / "checkpoints" / stem


def _latest_checkpoint(run: Path) -> Path:
    ckpts = sorted((run / "checkpoints").glob("step-*.json"),
                   key=lambda q: int(q.stem.split("-")[1]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run}")
    return ckpts[-1]


def cmd_gen_tasks(a) -> None:
    vocab = Vocab.build(a.vocab_size)
    rng = rng_for(a.seed, _TASKS)
    max_turns = 3 if a.hops_mix > 0 else 2
    corpus = generate_corpus(vocab, a.entities, rng)
    tasks = generate_tasks(corpus, a.tasks, rng, a.hops_mix, a.prefix_share, max_turns)
    eval_tasks = held_out_tasks(corpus, tasks, a.eval_tasks, rng, max_turns, a.hops_mix)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tasks(out / "tasks.json", vocab, corpus, tasks, eval_tasks)


def cmd_train(a) -> None:
    cfg = _read_config(a.config)
    if a.seed is not None:
        cfg = cfg.with_seed(a.seed)
    if a.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=a.steps))
    if a.lam is not None:
        cfg = cfg.with_lambda(a.lam)
    out = Path(a.out)
    lab = None
    if a.tasks:
        try:
            vocab, corpus, tasks, eval_tasks = load_tasks(a.tasks)
        except OSError as exc:
            raise UsageError(f"cannot read tasks {a.tasks}: {exc.strerror}") from exc
        lab = lab_from_files(cfg, vocab, corpus, tasks, eval_tasks)
        out.mkdir(parents=True, exist_ok=True)
        save_tasks(out / "tasks.json", vocab, corpus, tasks, eval_tasks)
    res = train_loop(cfg, out, lab)
    print(json.dumps(res.eval))


def cmd_probe(a) -> None:
    run = Path(a.run)
    cfg, lab = _run_lab(run)
    if a.seed is not None:
        lab.cfg = cfg = cfg.with_seed(a.seed)
    ckpt = _checkpoint_path(run, a.checkpoint)
    _, _, params = load_checkpoint(ckpt)
    step = int(ckpt.stem.split("-")[1]) if ckpt.stem.startswith("step-") else 0
    rows = run_probes(params, lab, step, a.tasks)
    out = Path(a.out) if a.out else run / f"probes-{ckpt.stem}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        dg.write_probes(rows, fh)


def cmd_eval(a) -> None:
    run = Path(a.run)
    _, lab = _run_lab(run)
    ckpt = _checkpoint_path(run, a.checkpoint) if a.checkpoint else _latest_checkpoint(run)
    _, _, params = load_checkpoint(ckpt)
    result = {"checkpoint": ckpt.stem, "em": evaluate(params, lab, lab.eval_tasks),
              "n_eval_tasks": len(lab.eval_tasks)}
    text = json.dumps(result, indent=1)
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(text)
    else:
        print(text)


def export_rows(metrics: Sequence[dg.StepMetrics], what: Sequence[str]) -> list[list]:
    rows = [["step", *what]]
    for m in metrics:
        rows.append([m.step, *(getattr(m, SERIES[w]) for w in what)])
    return rows


def cmd_export(a) -> None:
    what = [w.strip() for w in a.what.split(",") if w.strip()]
    bad = [w for w in what if w not in SERIES]
    if bad or not what:
        raise UsageError(f"unknown series {bad}; choose from {sorted(SERIES)}")
    metrics = dg.read_metrics(Path(a.run) / "metrics.jsonl")
    fh = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        csv.writer(fh, lineterminator="\n").writerows(export_rows(metrics, what))
    finally:
        if a.out:
            fh.close()


COMMANDS = {"gen-tasks": cmd_gen_tasks, "train": cmd_train, "probe": cmd_probe,
            "eval": cmd_eval, "export": cmd_export}


def run(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("LLDLAB_LOG", "").lower()
    if level in ("info", "debug"):
        logging.basicConfig(level=getattr(logging, level.upper()),
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"lldlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
