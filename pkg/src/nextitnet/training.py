"""Adam, the mini-batch loop, convergence logging and resumable checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import augment_all, last_item_batch, make_batch
from .evaluation import evaluate, model_scorer
from .model import NextItNet, read_checkpoint, save_checkpoint, model_from_checkpoint, sequence_loss

log = logging.getLogger(__name__)

OBJECTIVES = ("full_sequence", "last_item")
LOG_FIELDS = ("step", "sequences", "loss", "mrr5", "hr5", "ndcg5", "seconds", "val_loss")


class NumericFailure(RuntimeError):
    """Training hit non-finite gradients repeatedly or diverged."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 10
    eval_every_steps: int = 0  # 0: once per epoch
    objective: str = "full_sequence"
    augment: bool = False
    min_context: int = 5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    patience: int = 3
    eval_subsample: int = 1024
    target_val_loss: float | None = None
    max_nonfinite_steps: int = 3
    divergence_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainRecord:
    step: int
    sequences: int
    loss: float
    mrr5: float
    hr5: float
    ndcg5: float
    seconds: float
    val_loss: float

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps({k: d[k] for k in LOG_FIELDS})


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    stopped_early: bool = False
    reached_target_at: int | None = None

    def append(self, rec: TrainRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("log steps must be strictly increasing")
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def sequences_to_reach(self, val_loss: float) -> int | None:
        """Cumulative training sequences at the first record at or below ``val_loss``."""
        for r in self.records:
            if r.val_loss <= val_loss:
                return r.sequences
        return None

    @property
    def best_mrr5(self) -> float:
        return max((r.mrr5 for r in self.records), default=0.0)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named_params, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update (or plain SGD) from the populated ``.grad``."""
    state.step += 1
    lr = config.learning_rate
    if config.optimizer == "sgd":
        for _, p in named_params:
            if p.grad is not None:
                p.data = p.data - lr * p.grad
        return
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def global_grad_norm(named_params) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in named_params if p.grad is not None))


def clip_grads(named_params, max_norm: float) -> float:
    norm = global_grad_norm(named_params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def training_windows(train_windows, config: TrainConfig) -> tuple[np.ndarray, bool]:
    """Sequences to iterate over and whether only the last target counts."""
    w = np.asarray(train_windows, dtype=np.int64)
    if config.augment:
        w = augment_all(w, config.min_context)
    return w, config.objective == "last_item"


def validation_loss(model: NextItNet, windows: np.ndarray, batch_size: int = 512) -> float:
    """Mean cross entropy of the last item per validation window (nats)."""
    total = 0.0
    for lo in range(0, len(windows), batch_size):
        b = last_item_batch(windows[lo : lo + batch_size])
        total += sequence_loss(model.forward(b.inputs), b.targets, b.pad_mask).item()
    return total / len(windows)


def evaluate_during_training(model: NextItNet, windows, n: int = 5, subsample: int | None = 1024):
    """(mrr, hr, ndcg) at ``n`` on the first ``subsample`` validation windows."""
    w = np.asarray(windows)
    if subsample is not None and subsample < len(w):
        w = w[:subsample]
    rep = evaluate(model_scorer(model), w, ns=(n,))
    return rep.metrics[n]["mrr"], rep.metrics[n]["hr"], rep.metrics[n]["ndcg"]


def _adam_tensors(state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for k, v in state.m.items():
        out["adam.m." + k] = v
        out["adam.v." + k] = state.v[k]
    return out


def _adam_from(tensors: dict[str, np.ndarray], step: int, dtype) -> AdamState:
    st = AdamState(step=step)
    for k, v in tensors.items():
        if k.startswith("adam.m."):
            st.m[k[7:]] = v.astype(dtype)
        elif k.startswith("adam.v."):
            st.v[k[7:]] = v.astype(dtype)
    return st


class Trainer:
    """Runs :func:`train`; keeps the loop state so it can checkpoint and resume."""

    def __init__(self, model: NextItNet, config: TrainConfig, checkpoint_dir=None, log_path=None):
        self.model = model
        self.config = config
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_path = Path(log_path) if log_path else None
        self.state = AdamState()
        self.log = TrainLog()
        self.epoch = 0
        self.step = 0
        self.sequences = 0
        self.best_mrr = -1.0
        self.bad_evals = 0
        self.initial_loss: float | None = None
        self.elapsed = 0.0
        self.done = False

    # -- checkpointing -----------------------------------------------------
    def _meta(self) -> dict:
        return {
            "train_config": self.config.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "sequences": self.sequences,
            "best_mrr": self.best_mrr,
            "bad_evals": self.bad_evals,
            "initial_loss": self.initial_loss,
            "adam_step": self.state.step,
            "elapsed": self.elapsed,
            "done": self.done,
            "log": [dataclasses.asdict(r) for r in self.log.records],
            "stopped_early": self.log.stopped_early,
            "reached_target_at": self.log.reached_target_at,
        }

    def save(self, path) -> None:
        save_checkpoint(self.model, path, meta=self._meta(), extra=_adam_tensors(self.state))

    @classmethod
    def resume(cls, path, checkpoint_dir=None, log_path=None, config: TrainConfig | None = None) -> "Trainer":
        ckpt = read_checkpoint(path)
        meta = ckpt.meta
        stored = TrainConfig(**meta["train_config"])
        tr = cls(model_from_checkpoint(ckpt), config or stored, checkpoint_dir, log_path)
        tr.state = _adam_from(ckpt.tensors, meta["adam_step"], ckpt.config.np_dtype)
        tr.epoch, tr.step, tr.sequences = meta["epoch"], meta["step"], meta["sequences"]
        tr.best_mrr, tr.bad_evals = meta["best_mrr"], meta["bad_evals"]
        tr.initial_loss, tr.elapsed, tr.done = meta["initial_loss"], meta["elapsed"], meta["done"]
        tr.log = TrainLog([TrainRecord(**r) for r in meta["log"]], meta["stopped_early"], meta["reached_target_at"])
        return tr

    # -- loop ----------------------------------------------------------------
    def _record(self, valid: np.ndarray, window_loss: list[float]) -> None:
        cfg = self.config
        sub = valid[: cfg.eval_subsample] if cfg.eval_subsample else valid
        mrr, hr, ndcg = evaluate_during_training(self.model, sub, 5, None)
        vloss = validation_loss(self.model, sub)
        rec = TrainRecord(
            self.step,
            self.sequences,
            float(np.mean(window_loss)) if window_loss else float("nan"),
            mrr,
            hr,
            ndcg,
            round(self.elapsed, 3),
            vloss,
        )
        self.log.append(rec)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(rec.to_json() + "\n")
        log.info("step %d seqs %d loss %.4f val_loss %.4f mrr@5 %.4f", rec.step, rec.sequences, rec.loss, vloss, mrr)
        if mrr > self.best_mrr:
            self.best_mrr, self.bad_evals = mrr, 0
        else:
            self.bad_evals += 1
            if cfg.patience and self.bad_evals >= cfg.patience:
                self.log.stopped_early = True
                self.done = True
        if cfg.target_val_loss is not None and vloss <= cfg.target_val_loss and self.log.reached_target_at is None:
            self.log.reached_target_at = self.sequences
            self.done = True

    def run(self, train_windows, valid_windows) -> tuple[NextItNet, TrainLog]:
        cfg = self.config
        seqs, last_only = training_windows(train_windows, cfg)
        if len(seqs) == 0:
            raise ValueError("empty training set")
        valid = np.asarray(valid_windows, dtype=np.int64)
        params = list(self.model.named_parameters())
        bs = cfg.batch_size
        nonfinite = 0
        while not self.done and self.epoch < cfg.max_epochs:
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, self.epoch]).permutation(len(seqs))
            sample_rng = np.random.default_rng([cfg.seed, self.epoch, 1])
            n_batches = max(1, len(seqs) // bs)
            window_loss: list[float] = []
            epoch_loss: list[float] = []
            for b in range(n_batches):
                idx = order[b * bs : (b + 1) * bs]
                chunk = seqs[idx]
                batch = last_item_batch(chunk) if last_only else make_batch(chunk)
                n_targets = int(batch.pad_mask.sum())
                if n_targets == 0:
                    continue
                self.model.params.zero_grad()
                with nx.Tape() as tape:
                    loss = self.model.loss(batch.inputs, batch.targets, batch.pad_mask, sample_rng)
                    scaled = nx.mul(loss, 1.0 / len(chunk))
                    tape.backward(scaled)
                per_target = loss.item() / n_targets
                grads_ok = math.isfinite(per_target) and all(
                    p.grad is None or np.isfinite(p.grad).all() for _, p in params
                )
                if not grads_ok:
                    nonfinite += 1
                    log.warning("non-finite loss/gradient at step %d; update skipped", self.step)
                    if nonfinite >= cfg.max_nonfinite_steps:
                        raise NumericFailure(f"{nonfinite} consecutive non-finite steps")
                    continue
                nonfinite = 0
                if cfg.clip_norm:
                    clip_grads(params, cfg.clip_norm)
                adam_step(params, self.state, cfg)
                self.step += 1
                self.sequences += len(chunk)
                if self.initial_loss is None:
                    self.initial_loss = per_target
                window_loss.append(per_target)
                epoch_loss.append(per_target)
                if cfg.eval_every_steps and self.step % cfg.eval_every_steps == 0:
                    self.elapsed += time.perf_counter() - t0
                    t0 = time.perf_counter()
                    self._record(valid, window_loss)
                    window_loss = []
                    if self.done:
                        break
            self.elapsed += time.perf_counter() - t0
            if epoch_loss and self.initial_loss is not None and min(epoch_loss) > cfg.divergence_factor * self.initial_loss:
                raise NumericFailure(
                    f"diverged: epoch {self.epoch} loss stayed above {cfg.divergence_factor}x the initial {self.initial_loss:.4f}"
                )
            if not cfg.eval_every_steps and not self.done:
                self._record(valid, window_loss)
            self.epoch += 1
            if self.checkpoint_dir:
                self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
                self.save(self.checkpoint_dir / "last.ckpt")
        self.done = True
        return self.model, self.log


def train(model: NextItNet, train_windows, valid_windows, config: TrainConfig, checkpoint_dir=None, log_path=None):
    """Fit ``model`` in place; returns ``(model, TrainLog)``."""
    return Trainer(model, config, checkpoint_dir, log_path).run(train_windows, valid_windows)
