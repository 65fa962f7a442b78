"""Shared setup for the experiment scripts: the synthetic task and a runner."""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

from nextitnet.data import split, synth_markov
from nextitnet.evaluation import bayes_scorer, evaluate, model_scorer, mostpop_scorer
from nextitnet.model import ModelConfig, NextItNet
from nextitnet.training import TrainConfig, train


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--num-items", type=int, default=100)
    p.add_argument("--num-sessions", type=int, default=20000)
    p.add_argument("--t", type=int, default=10)
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--width", type=int, default=64, help="embedding width 2k")
    p.add_argument("--out", type=Path, default=None, help="write results as JSON here")
    return p


def load_task(args):
    d = synth_markov(args.num_items, args.num_sessions, args.t, transition_seed=args.data_seed)
    tr, va, te = split(d.sessions, seed=args.seed)
    return d, tr, va, te


def reference_scores(d, tr, te, n):
    return {
        "bayes_mrr5": evaluate(bayes_scorer(d.transition), te)["mrr@5"],
        "mostpop_mrr5": evaluate(mostpop_scorer(tr, n), te)["mrr@5"],
    }


def fit(name, model_cfg: ModelConfig, train_cfg: TrainConfig, tr, va, te) -> dict:
    t0 = time.perf_counter()
    model, log = train(NextItNet(model_cfg), tr, va, train_cfg)
    report = evaluate(model_scorer(model), te, name=name)
    res = {
        "name": name,
        "seconds": round(time.perf_counter() - t0, 1),
        "epochs": len(log.records),
        "sequences": log.records[-1].sequences if log.records else 0,
        "reached_target_at": log.reached_target_at,
        "curve": [(r.sequences, r.val_loss, r.mrr5) for r in log.records],
        **{f"{m}{n}": report.metrics[n][m] for n in report.ns for m in ("mrr", "hr", "ndcg")},
    }
    print(f"{name:<24} MRR@5 {res['mrr5']:.4f}  HR@5 {res['hr5']:.4f}  NDCG@5 {res['ndcg5']:.4f}  ({res['seconds']}s)")
    return res


def model_config(args, n, **kw) -> ModelConfig:
    base = dict(vocab_size=n, embedding_width=args.width, dilations=(1, 2, 4), seed=args.seed)
    base.update(kw)
    return ModelConfig(**base)


def train_config(args, **kw) -> TrainConfig:
    return dataclasses.replace(TrainConfig(max_epochs=args.epochs, seed=args.seed), **kw)


def dump(args, payload: dict) -> None:
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(payload, indent=2) + "\n")
        print(f"results written to {args.out}")
