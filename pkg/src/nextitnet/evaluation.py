"""Top-N ranking metrics on the last item of each sequence, plus reference scorers.

A scorer is any callable mapping a ``(batch, L)`` matrix of item-index
prefixes to a ``(batch, n)`` score matrix. Higher scores rank first; ties go to
the smaller item index; the padding column is never a candidate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import PAD, DataError

Scorer = Callable[[np.ndarray], np.ndarray]
DEFAULT_NS = (5, 20)
METRICS = ("mrr", "hr", "ndcg")


def rank_of_target(scores, target: int) -> int:
    scores = np.asarray(scores)
    if target == PAD:
        raise ValueError("the padding index is not a rankable target")
    if not 0 < target < scores.shape[-1]:
        raise IndexError(f"target {target} outside [1, {scores.shape[-1]})")
    return int(ranks_of_targets(scores[None, :], np.array([target]))[0])


def ranks_of_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rank_of_target` over rows."""
    s = np.asarray(scores)[:, 1:]
    tgt = np.asarray(targets, dtype=np.int64) - 1
    st = s[np.arange(len(tgt)), tgt][:, None]
    higher = (s > st).sum(axis=1)
    ties_before = ((s == st) & (np.arange(s.shape[1])[None, :] < tgt[:, None])).sum(axis=1)
    return 1 + higher + ties_before


def metrics_for_sequence(rank: int, n: int) -> tuple[float, float, float]:
    """(mrr, hr, ndcg) contributions of a single relevant item at ``rank``."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > n:
        return 0.0, 0.0, 0.0
    return 1.0 / rank, 1.0, 1.0 / math.log2(rank + 1)


def _metric_arrays(ranks: np.ndarray, n: int) -> dict[str, np.ndarray]:
    r = ranks.astype(np.float64)
    hit = r <= n
    return {
        "mrr": np.where(hit, 1.0 / r, 0.0),
        "hr": hit.astype(np.float64),
        "ndcg": np.where(hit, 1.0 / np.log2(r + 1.0), 0.0),
    }


@dataclass
class RankingReport:
    metrics: dict[int, dict[str, float]]
    count: int
    name: str = ""
    ranks: np.ndarray | None = field(default=None, repr=False)

    def __getitem__(self, key: str) -> float:
        """``report["mrr@5"]``."""
        metric, _, n = key.partition("@")
        return self.metrics[int(n)][metric]

    @property
    def ns(self) -> list[int]:
        return sorted(self.metrics)

    def to_table(self) -> str:
        head = f"{'metric':<8}" + "".join(f"{'@' + str(n):>10}" for n in self.ns)
        lines = [head]
        for m in METRICS:
            lines.append(f"{m.upper():<8}" + "".join(f"{self.metrics[n][m]:>10.4f}" for n in self.ns))
        lines.append(f"({self.count} sequences{', ' + self.name if self.name else ''})")
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [
            {"name": self.name, "metric": m, "n": n, "value": self.metrics[n][m], "count": self.count}
            for n in self.ns
            for m in METRICS
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "RankingReport":
        metrics: dict[int, dict[str, float]] = {}
        for r in records:
            metrics.setdefault(int(r["n"]), {})[r["metric"]] = float(r["value"])
        first = records[0] if records else {}
        return cls(metrics, int(first.get("count", 0)), first.get("name", ""))


def report_from_ranks(ranks: np.ndarray, ns=DEFAULT_NS, name: str = "") -> RankingReport:
    ranks = np.asarray(ranks)
    metrics = {}
    for n in ns:
        arr = _metric_arrays(ranks, n)
        # fixed summation order: sequence index
        metrics[int(n)] = {m: float(math.fsum(arr[m]) / len(ranks)) for m in METRICS}
    return RankingReport(metrics, int(len(ranks)), name, ranks)


def evaluate(scorer: Scorer, windows, ns=DEFAULT_NS, batch_size: int = 512, name: str = "") -> RankingReport:
    """Rank the last item of every window given the rest as the prefix."""
    w = np.asarray(windows, dtype=np.int64)
    if w.ndim != 2 or len(w) == 0:
        raise DataError("evaluation needs a non-empty 2-D array of windows")
    if w.shape[1] < 2:
        raise DataError("test windows need at least two items")
    ranks = np.empty(len(w), dtype=np.int64)
    for lo in range(0, len(w), batch_size):
        chunk = w[lo : lo + batch_size]
        scores = np.asarray(scorer(chunk[:, :-1]))
        ranks[lo : lo + len(chunk)] = ranks_of_targets(scores, chunk[:, -1])
    return report_from_ranks(ranks, ns, name)


class MostPopScorer:
    """Static popularity ranking from training-set item counts."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.float64)

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.counts, (len(prefixes), self.counts.size))


def mostpop_scorer(train_windows, vocab_size: int | None = None) -> MostPopScorer:
    w = np.asarray(train_windows, dtype=np.int64).reshape(-1)
    if w.size == 0:
        raise DataError("MostPop needs non-empty training data")
    n = int(w.max()) + 1 if vocab_size is None else vocab_size
    counts = np.bincount(w, minlength=n).astype(np.float64)
    counts[PAD] = 0.0
    return MostPopScorer(counts)


class BayesScorer:
    """Scores candidates by the true transition row of the prefix's last item."""

    def __init__(self, transition: np.ndarray):
        P = np.asarray(transition, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("transition matrix must be square")
        rows = P.sum(axis=1)
        live = rows > 0
        if not np.allclose(rows[live], 1.0, atol=1e-9) or (P < 0).any():
            raise ValueError("transition matrix must be row-stochastic")
        self.transition = P

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        return self.transition[np.asarray(prefixes)[:, -1]]


def bayes_scorer(transition: np.ndarray) -> BayesScorer:
    return BayesScorer(transition)


def model_scorer(model) -> Scorer:
    """Full-softmax next-item log-probabilities from a trained network."""
    return model.score_last


def uniform_mrr(n_items: int, cutoff: int) -> float:
    """Expected MRR@cutoff under constant scores with index tie-break.

    Each target's rank is its position among the ``n_items`` real items, so the
    mean over uniformly drawn targets is ``sum(1/r for r <= cutoff) / n_items``.
    """
    return sum(1.0 / r for r in range(1, min(cutoff, n_items) + 1)) / n_items
