"""Command-line front door: synth, preprocess, train, evaluate, generate, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from .config import SCHEMA, ConfigError, RunConfig
from .evaluation import DEFAULT_NS, bayes_scorer, evaluate, model_scorer, mostpop_scorer
from .model import CheckpointError, NextItNet, count_parameters, generate, load_checkpoint
from .numerics import NumericError
from .training import NumericFailure, Trainer

log = logging.getLogger("nextitnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_dir(out_dir: str | None, seed: int) -> Path:
    path = Path(out_dir) if out_dir else Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ns(text: str) -> tuple[int, ...]:
    try:
        ns = tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ns or min(ns) < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive")
    return ns


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return tuple(parts)


# ---------------------------------------------------------------------------
# transition files (synthetic oracle)
# ---------------------------------------------------------------------------


def write_transition(path, item_ids: list[str], matrix: np.ndarray) -> None:
    lines = ["#items " + " ".join(item_ids) + "\n"]
    lines += [" ".join(repr(float(x)) for x in row) + "\n" for row in matrix]
    Path(path).write_text("".join(lines))


def read_transition(path, vocab: D.Vocab) -> np.ndarray:
    """Transition matrix re-indexed into ``vocab`` index space (row/col 0 = padding)."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#items "):
        raise D.DataError(f"{path}: missing '#items' header")
    ids = lines[0].split()[1:]
    rows = np.array([[float(x) for x in ln.split()] for ln in lines[1:] if ln.strip()])
    if rows.shape != (len(ids), len(ids)):
        raise D.DataError(f"{path}: matrix shape {rows.shape} does not match {len(ids)} items")
    pos = np.array([vocab.index.get(i, -1) for i in ids])
    out = np.zeros((vocab.size, vocab.size))
    keep = pos >= 0
    out[np.ix_(pos[keep], pos[keep])] = rows[np.ix_(keep, keep)]
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _run_dir(args.out_dir, args.seed)
    md = D.synth_markov(args.num_items, args.num_sessions, args.t, transition_seed=args.seed, concentration=args.concentration)
    ids = [str(i) for i in range(1, args.num_items + 1)]
    (out / "sessions.txt").write_text("".join(" ".join(map(str, s)) + "\n" for s in md.sessions.tolist()))
    write_transition(out / "transition.txt", ids, md.transition[1:, 1:])
    print(f"wrote {args.num_sessions} sessions and the transition matrix to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    out = _run_dir(args.out_dir, args.seed)
    raw = D.read_raw_sessions(args.raw)
    if not raw:
        raise D.DataError(f"{args.raw}: no sessions")
    vocab = D.Vocab.load(args.vocab) if args.vocab else D.build_vocab(ids for ids, _ in raw)
    sessions, unknown = D.encode_sessions(raw, vocab)
    gap = None if args.max_gap <= 0 else args.max_gap
    windows, dropped_gap, dropped_items = [], 0, 0
    for s in sessions:
        got = D.window_extract(s, args.t, gap, pad_remainder=args.keep_remainder)
        full = len(s) // args.t
        dropped_gap += full - sum(1 for w in got if D.PAD not in w.items)
        if not args.keep_remainder:
            dropped_items += len(s) % args.t
        windows.extend(w.items for w in got)
    arr = np.asarray(windows, dtype=np.int64).reshape(-1, args.t)
    D.write_windows(out / "windows.txt", arr, vocab.size)
    vocab.save(out / "vocab.tsv")
    stats = {
        "sessions_in": len(raw),
        "sessions_unknown_items": unknown,
        "windows_out": int(len(arr)),
        "windows_dropped_gap": dropped_gap,
        "remainder_items_dropped": dropped_items,
        "vocab_size": vocab.size,
        "t": args.t,
    }
    if len(arr):
        train, valid, test = D.split(arr, args.split, args.seed)
        for name, part in (("train", train), ("valid", valid), ("test", test)):
            D.write_windows(out / f"{name}.txt", part, vocab.size)
            stats[f"{name}_windows"] = int(len(part))
        if args.augment:
            subs = D.augment_all(train, args.min_context)[len(train) :]
            D.write_windows(out / "train_subsessions.txt", subs, vocab.size)
            stats["sub_sessions"] = int(len(subs))
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    for k in sorted(stats):
        print(f"{k:<24} {stats[k]}")
    return EXIT_OK


def _config_overrides(args) -> dict:
    return {k: getattr(args, k) for k in SCHEMA if getattr(args, k, None) is not None}


def cmd_train(args) -> int:
    cfg = RunConfig.merge(args.config, _config_overrides(args))
    if not cfg["data_dir"]:
        raise UsageError("train needs --data-dir (or data_dir in the config file)")
    data_dir = Path(cfg["data_dir"])
    train_w, n, _ = D.read_windows(data_dir / "train.txt")
    valid_w, n_valid, _ = D.read_windows(data_dir / "valid.txt")
    if n_valid != n:
        raise D.DataError("train and valid files disagree on vocabulary size")
    if len(train_w) == 0:
        raise D.DataError("empty training set")
    try:
        model_cfg, train_cfg = cfg.model_config(n), cfg.train_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _run_dir(cfg["out_dir"] or None, cfg["seed"])
    print("effective config:\n" + cfg.render(), file=sys.stderr, end="")
    (out / "config.txt").write_text(cfg.render())
    if (data_dir / "vocab.tsv").exists():
        shutil.copyfile(data_dir / "vocab.tsv", out / "vocab.tsv")
    log_path = out / "train_log.jsonl"
    if args.resume:
        trainer = Trainer.resume(args.resume, out, log_path, train_cfg)
    else:
        if log_path.exists():
            log_path.unlink()
        trainer = Trainer(NextItNet(model_cfg), train_cfg, out, log_path)
    model, tlog = trainer.run(train_w, valid_w)
    trainer.save(out / "final.ckpt")
    last = tlog.records[-1] if tlog.records else None
    if last:
        print(f"trained {last.step} steps ({last.sequences} sequences); validation MRR@5 {last.mrr5:.4f}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    test_w, n, _ = D.read_windows(args.test)
    ns = args.ns
    if args.baseline == "mostpop":
        if not args.train:
            raise UsageError("--baseline mostpop needs --train")
        train_w, _, _ = D.read_windows(args.train)
        scorer, name = mostpop_scorer(train_w, n), "mostpop"
    elif args.oracle:
        if not args.vocab:
            raise UsageError("--oracle needs --vocab")
        scorer, name = bayes_scorer(read_transition(args.oracle, D.Vocab.load(args.vocab))), "oracle"
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint, --baseline mostpop or --oracle")
        model = load_checkpoint(args.checkpoint)
        if model.config.vocab_size != n:
            raise D.DataError(f"test file vocabulary {n} != model vocabulary {model.config.vocab_size}")
        scorer, name = model_scorer(model), "model"
    report = evaluate(scorer, test_w, ns, name=name)
    print(report.to_table())
    out = _run_dir(args.out_dir, args.seed)
    (out / "report.jsonl").write_text(report.to_jsonl())
    (out / "report.txt").write_text(report.to_table() + "\n")
    return EXIT_OK


def _vocab_for(args) -> D.Vocab:
    path = Path(args.vocab) if args.vocab else Path(args.checkpoint).with_name("vocab.tsv")
    if not path.exists():
        raise D.DataError(f"vocabulary file {path} not found (use --vocab)")
    return D.Vocab.load(path)


def cmd_generate(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    model = load_checkpoint(args.checkpoint)
    vocab = _vocab_for(args)
    try:
        prefix = [vocab.encode(tok) for tok in args.prefix]
    except KeyError as e:
        raise D.DataError(f"unknown seed item id {e.args[0]!r}") from None
    if not prefix:
        raise UsageError("generate needs at least one seed item")
    items = generate(model, prefix, args.steps) if args.steps else []
    print(" ".join(vocab.decode(i) for i in items))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    counts = count_parameters(model)
    print("config:")
    for k, v in cfg.to_dict().items():
        print(f"  {k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    print("parameters:")
    for k in ("embedding", "blocks", "norms", "biases", "projection", "total"):
        print(f"  {k:<12} {counts[k]}")
    print(f"  per_block_conv_weights {' '.join(map(str, counts['per_block']))}")
    print(f"  per_dilated_conv_weights {' '.join(map(str, counts['per_dilated_conv']))}")
    print(f"receptive_field = {cfg.receptive_field()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _shared(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, default=None if with_config else 0, help="random seed")
    p.add_argument("--out-dir", dest="out_dir", default=None, help="output directory (default: runs/<timestamp>-seed<seed>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nextitnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="sample sessions from a random first-order Markov chain")
    _shared(p, with_config=False)
    p.add_argument("--num-items", type=int, default=100, help="number of real items")
    p.add_argument("--num-sessions", type=int, default=20000, help="sessions to sample")
    p.add_argument("--t", type=int, default=10, help="session length")
    p.add_argument("--concentration", type=float, default=0.1, help="Dirichlet concentration of each transition row")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="vocabulary, sliding windows and train/valid/test split")
    _shared(p, with_config=False)
    p.add_argument("raw", help="raw session file (one session per line, 'id' or 'id@timestamp' tokens)")
    p.add_argument("--t", type=int, required=True, help="window size and stride")
    p.add_argument("--max-gap", type=float, default=D.DEFAULT_MAX_GAP, help="drop windows whose last gap exceeds this many seconds (<=0 disables)")
    p.add_argument("--split", type=_ratios, default=(0.5, 0.05, 0.45), help="train,valid,test ratios")
    p.add_argument("--augment", action="store_true", help="also write padded sub-sessions of the training windows")
    p.add_argument("--min-context", type=int, default=5, help="shortest real context kept by --augment")
    p.add_argument("--keep-remainder", action="store_true", help="left-pad trailing remainders instead of dropping them")
    p.add_argument("--vocab", help="encode with an existing vocab.tsv; sessions with unknown ids are dropped")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on preprocessed windows")
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--resume", help="continue from a training checkpoint (last.ckpt)")
    for key in SCHEMA.values():
        flag = "--" + key.name.replace("_", "-")
        p.add_argument(flag, dest=key.name, default=None, help=f"{key.help} (default {key.default})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MRR/HR/NDCG@N of the last item of each test window")
    _shared(p)
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--test", required=True, help="test windows file")
    p.add_argument("--ns", type=_ns, default=DEFAULT_NS, help="cutoffs, e.g. 5,20")
    p.add_argument("--baseline", choices=["mostpop"], help="score with a baseline instead of the checkpoint")
    p.add_argument("--train", help="training windows (for --baseline mostpop)")
    p.add_argument("--oracle", help="transition file from 'synth' (Bayes-optimal scorer)")
    p.add_argument("--vocab", help="vocab.tsv used to map --oracle item ids")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="greedy roll-out from a seed prefix")
    _shared(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--vocab", help="vocab.tsv (default: next to the checkpoint)")
    p.add_argument("--steps", type=int, default=1, help="items to generate")
    p.add_argument("prefix", nargs="+", help="seed item ids")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inspect", help="architecture summary, parameter counts and receptive field")
    _shared(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, CheckpointError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
