"""Sessions, vocabulary, windowing, sub-session augmentation, splits, synthetic data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
DEFAULT_MAX_GAP = 7200.0


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class Vocab:
    """Item id <-> contiguous index map; index 0 is padding."""

    ids: list[str] = field(default_factory=lambda: ["<pad>"])
    index: dict[str, int] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def add(self, item_id: str) -> int:
        if item_id not in self.index:
            self.index[item_id] = len(self.ids)
            self.ids.append(item_id)
        return self.index[item_id]

    def encode(self, item_id: str) -> int:
        return self.index[item_id]

    def decode(self, idx: int) -> str:
        if idx == PAD:
            raise KeyError("padding index has no item id")
        return self.ids[idx]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{i}\t{item}\n" for i, item in enumerate(self.ids) if i != PAD))

    @classmethod
    def load(cls, path) -> "Vocab":
        v = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                idx, item = line.split("\t")
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected '<index>\\t<item id>'") from None
            if int(idx) != v.add(item):
                raise DataError(f"{path}:{lineno}: non-contiguous index {idx}")
        return v


@dataclass
class Session:
    items: list[int]
    timestamps: list[float] | None = None

    def __post_init__(self):
        if len(self.items) < 1:
            raise DataError("a session needs at least one item")
        if self.timestamps is not None and len(self.timestamps) != len(self.items):
            raise DataError("timestamps must align with items")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SequenceBatch:
    inputs: np.ndarray  # (B, L)
    targets: np.ndarray  # (B, L)
    pad_mask: np.ndarray  # (B, L) bool; True where the target counts

    def __len__(self) -> int:
        return self.inputs.shape[0]


def build_vocab(sessions: Iterable[Sequence[str]]) -> Vocab:
    """Index item ids in first-seen order."""
    vocab = Vocab()
    for s in sessions:
        for item in s:
            vocab.add(item)
    if vocab.size == 1:
        raise DataError("cannot build a vocabulary from an empty session stream")
    return vocab


def window_extract(
    session: Session,
    t: int,
    max_gap_seconds: float | None = DEFAULT_MAX_GAP,
    pad_remainder: bool = False,
) -> list[Session]:
    """Cut non-overlapping windows of exactly ``t`` items (stride ``t``).

    The trailing remainder is dropped unless ``pad_remainder`` (then it is
    left-padded to ``t`` when it has at least two items). A window whose last
    two events are more than ``max_gap_seconds`` apart is discarded; that check
    needs timestamps.
    """
    if t < 2:
        raise ValueError("window length t must be >= 2")
    out = []
    for w in range(len(session) // t):
        lo, hi = w * t, (w + 1) * t
        ts = None
        if session.timestamps is not None:
            ts = session.timestamps[lo:hi]
            if max_gap_seconds is not None and ts[-1] - ts[-2] > max_gap_seconds:
                continue
        out.append(Session(session.items[lo:hi], ts))
    rest = len(session) % t
    if pad_remainder and rest >= 2:
        items = session.items[-rest:]
        ts = None
        if session.timestamps is not None:
            ts = session.timestamps[-rest:]
            if max_gap_seconds is not None and ts[-1] - ts[-2] > max_gap_seconds:
                return out
            ts = [ts[0]] * (t - rest) + ts
        out.append(Session([PAD] * (t - rest) + items, ts))
    return out


def make_batch(windows: Sequence[Sequence[int]], t: int | None = None) -> SequenceBatch:
    """Shift-by-one alignment: inputs ``w[:-1]``, targets ``w[1:]``."""
    arr = _as_matrix(windows, t)
    inputs = arr[:, :-1]
    targets = arr[:, 1:]
    return SequenceBatch(inputs, targets, targets != PAD)


def last_item_batch(windows: Sequence[Sequence[int]], t: int | None = None) -> SequenceBatch:
    """Like :func:`make_batch` but only the final target counts."""
    b = make_batch(windows, t)
    mask = np.zeros_like(b.pad_mask)
    mask[:, -1] = True
    return SequenceBatch(b.inputs, b.targets, mask)


def _as_matrix(windows, t) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        arr = np.asarray(windows, dtype=np.int64)
        if arr.ndim != 2:
            raise ValueError("windows must be a 2-D array")
    else:
        lengths = {len(w) for w in windows}
        if len(lengths) > 1:
            raise ValueError(f"ragged windows: lengths {sorted(lengths)}")
        arr = np.asarray([list(w) for w in windows], dtype=np.int64)
    if t is not None and arr.shape[1] != t:
        raise ValueError(f"windows have length {arr.shape[1]}, expected {t}")
    if arr.shape[1] < 2:
        raise ValueError("windows need at least two items")
    return arr


def sub_session_augment(window: Sequence[int], min_context: int = 5) -> list[list[int]]:
    """Padded truncations: for s = 1..t-min_context, ``[PAD]*s + window[:-s]``."""
    t = len(window)
    w = list(window)
    return [[PAD] * s + w[: t - s] for s in range(1, t - min_context + 1)]


def augment_all(windows: np.ndarray, min_context: int = 5) -> np.ndarray:
    """Original windows followed by every window's sub-sessions."""
    windows = np.asarray(windows, dtype=np.int64)
    t = windows.shape[1]
    subs = [windows]
    for s in range(1, t - min_context + 1):
        a = np.zeros_like(windows)
        a[:, s:] = windows[:, : t - s]
        subs.append(a)
    return np.concatenate(subs, axis=0)


def split(windows, ratios=(0.5, 0.05, 0.45), seed: int = 0):
    """Seeded shuffle, then cut by ratio into (train, valid, test)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    arr = np.asarray(windows)
    n = len(arr)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    idx = np.split(perm, [n_train, n_train + n_valid])
    return tuple(arr[i] for i in idx)


@dataclass
class MarkovData:
    sessions: np.ndarray  # (num_sessions, t), item indices 1..num_items
    transition: np.ndarray  # (num_items + 1, num_items + 1); row/col 0 is padding
    initial: np.ndarray


def random_transition_matrix(num_items: int, rng: np.random.Generator, concentration: float = 0.1) -> np.ndarray:
    """Row-stochastic matrix, each row normalized gamma draws (Dirichlet)."""
    g = rng.gamma(concentration, size=(num_items, num_items))
    g[g.sum(axis=1) == 0] = 1.0
    return g / g.sum(axis=1, keepdims=True)


def synth_markov(
    num_items: int,
    num_sessions: int,
    t: int,
    transition_seed: int = 0,
    sample_seed: int | None = None,
    concentration: float = 0.1,
    transition: np.ndarray | None = None,
) -> MarkovData:
    """Sample fixed-length sessions from a first-order Markov chain over items.

    Items are indices ``1..num_items``; the returned matrix is padded with an
    all-zero row and column for index 0 so it can be indexed by item index.
    Pass ``transition`` (``num_items x num_items``) to use a fixed chain.
    """
    if num_items < 2:
        raise ValueError("num_items must be >= 2")
    rng = np.random.default_rng(transition_seed)
    P = random_transition_matrix(num_items, rng, concentration) if transition is None else np.asarray(transition, float)
    if P.shape != (num_items, num_items):
        raise ValueError("transition must be num_items x num_items")
    srng = np.random.default_rng(transition_seed + 1 if sample_seed is None else sample_seed)
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((num_sessions, t), dtype=np.int64)
    state = srng.integers(0, num_items, size=num_sessions)
    out[:, 0] = state
    for i in range(1, t):
        u = srng.random(num_sessions)
        state = (u[:, None] > cdf[state]).sum(axis=1)
        out[:, i] = state
    full = np.zeros((num_items + 1, num_items + 1))
    full[1:, 1:] = P
    initial = np.zeros(num_items + 1)
    initial[1:] = 1.0 / num_items
    return MarkovData(out + 1, full, initial)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def parse_session_line(line: str, lineno: int = 0) -> tuple[list[str], list[float] | None]:
    ids, stamps = [], []
    for tok in line.split():
        if "@" in tok:
            item, _, ts = tok.rpartition("@")
            try:
                stamps.append(float(ts))
            except ValueError:
                raise DataError(f"line {lineno}: bad timestamp in {tok!r}") from None
            ids.append(item)
        else:
            ids.append(tok)
    if stamps and len(stamps) != len(ids):
        raise DataError(f"line {lineno}: timestamps given for some items but not all")
    return ids, (stamps or None)


def read_raw_sessions(path) -> list[tuple[list[str], list[float] | None]]:
    """One session per line; ``#`` lines and blank lines are skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            out.append(parse_session_line(s, lineno))
    return out


def write_windows(path, windows: np.ndarray, vocab_size: int) -> None:
    windows = np.asarray(windows, dtype=np.int64)
    t = windows.shape[1] if windows.ndim == 2 and windows.size else 0
    lines = [f"#vocab={vocab_size} t={t}\n"]
    lines += [" ".join(map(str, w)) + "\n" for w in windows.tolist()]
    Path(path).write_text("".join(lines))


def read_windows(path) -> tuple[np.ndarray, int, int]:
    """Returns ``(windows, vocab_size, t)``."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#vocab="):
        raise DataError(f"{path}: missing '#vocab=<n> t=<t>' header")
    try:
        fields = dict(tok.split("=") for tok in text[0][1:].split())
        n, t = int(fields["vocab"]), int(fields["t"])
    except (ValueError, KeyError):
        raise DataError(f"{path}: malformed header {text[0]!r}") from None
    rows = []
    for lineno, line in enumerate(text[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            row = [int(x) for x in line.split()]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer token") from None
        if len(row) != t:
            raise DataError(f"{path}:{lineno}: expected {t} indices, got {len(row)}")
        if min(row) < 0 or max(row) >= n:
            raise DataError(f"{path}:{lineno}: index outside [0, {n})")
        rows.append(row)
    return np.asarray(rows, dtype=np.int64).reshape(-1, t), n, t


def encode_sessions(raw, vocab: Vocab, strict: bool = False):
    """Map raw id sessions to :class:`Session`; unknown ids drop the line."""
    out, dropped = [], 0
    for ids, ts in raw:
        try:
            out.append(Session([vocab.encode(i) for i in ids], ts))
        except KeyError:
            if strict:
                raise
            dropped += 1
    if dropped:
        log.warning("dropped %d session(s) containing unknown item ids", dropped)
    return out, dropped
