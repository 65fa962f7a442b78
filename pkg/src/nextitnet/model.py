"""The generative next-item network: embedding, stacked residual blocks, output head."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .layers import (
    EmbeddingTable,
    ResidualBlock,
    ResidualBlockA,
    ResidualBlockB,
    conv_weight_count,
    embed,
    receptive_field,
    residual_forward,
    truncated_normal,
)
from .numerics import ContractError, Tensor

log = logging.getLogger(__name__)

PAD = 0

BLOCK_VARIANTS = ("A", "B")
OUTPUT_MODES = ("full_softmax", "sampled_softmax")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embedding_width: int = 64
    kernel_width: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    block_variant: str = "A"
    output_mode: str = "full_softmax"
    sample_size: int = 0
    residual: bool = True
    max_length: int = 1024
    layer_norm_eps: float = 1e-8
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (padding plus one item)")
        if self.embedding_width < 2 or self.embedding_width % 2:
            raise ValueError("embedding_width must be an even number >= 2")
        if self.kernel_width < 2:
            raise ValueError("kernel_width must be >= 2")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be a non-empty list of integers >= 1")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ValueError(f"block_variant must be one of {BLOCK_VARIANTS}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.output_mode == "sampled_softmax" and self.sample_size < 1:
            raise ValueError("sampled_softmax needs sample_size >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def inner_channels(self) -> int:
        return self.embedding_width // 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def block_dilations(self) -> list[tuple[int, ...]]:
        """Dilations per block: one per entry for A, consecutive pairs for B."""
        d = self.dilations
        if self.block_variant == "A":
            return [(x,) for x in d]
        pairs = [(d[i], d[i + 1]) for i in range(0, len(d) - 1, 2)]
        if len(d) % 2:
            pairs.append((d[-1], d[-1]))
        return pairs

    def receptive_field(self) -> int:
        flat = [x for pair in self.block_dilations() for x in pair]
        return receptive_field(self.kernel_width, flat)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["dilations"] = list(self.dilations)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParameters:
    embedding: EmbeddingTable
    blocks: list[ResidualBlock]
    projection: Tensor  # (2k, n)
    projection_bias: Tensor  # (n,)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.embedding.named_parameters("embedding.")
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"blocks.{i}.")
        yield "projection.weight", self.projection
        yield "projection.bias", self.projection_bias

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def init_parameters(config: ModelConfig) -> ModelParameters:
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    k, n, f = config.inner_channels, config.vocab_size, config.kernel_width
    emb = EmbeddingTable.init(n, 2 * k, rng, dt)
    blocks: list[ResidualBlock] = []
    for dil in config.block_dilations():
        if config.block_variant == "A":
            blocks.append(ResidualBlockA.init(k, dil[0], rng, f, config.layer_norm_eps, dt))
        else:
            blocks.append(ResidualBlockB.init(k, dil, rng, f, config.layer_norm_eps, dt))
    proj = Tensor(truncated_normal(rng, (2 * k, n), math.sqrt(1.0 / (2 * k)), dt), requires_grad=True)
    bias = Tensor(np.zeros(n, dt), requires_grad=True)
    return ModelParameters(emb, blocks, proj, bias)


class NextItNet:
    """Causal dilated-convolution model over item sequences.

    Row ``i`` of :meth:`forward` parameterizes ``p(x[i+1] | x[0..i])``.
    """

    def __init__(self, config: ModelConfig, params: ModelParameters | None = None):
        self.config = config
        self.params = params if params is not None else init_parameters(config)

    def named_parameters(self):
        return self.params.named_parameters()

    def _check_items(self, items) -> np.ndarray:
        x = np.asarray(items, dtype=np.int64)
        if x.ndim not in (1, 2):
            raise ContractError(f"items must be (t,) or (batch, t), got shape {x.shape}")
        t = x.shape[-1]
        if t < 1:
            raise ContractError("empty sequence")
        if t > self.config.max_length:
            raise ContractError(f"sequence length {t} exceeds max_length {self.config.max_length}")
        return x

    def hidden(self, items) -> Tensor:
        """Final hidden matrix, same shape as the embedded input."""
        x = self._check_items(items)
        h = embed(x, self.params.embedding)
        for block in self.params.blocks:
            h = residual_forward(h, block, skip=self.config.residual)
        return h

    def project(self, hidden: Tensor) -> Tensor:
        return nx.linear(hidden, self.params.projection, self.params.projection_bias)

    def forward(self, items) -> Tensor:
        """Logits of shape ``(..., t, n)``."""
        return self.project(self.hidden(items))

    __call__ = forward

    def distribution(self, items) -> np.ndarray:
        logits = self.forward(items)
        return nx.softmax_rows(logits).data

    def loss(self, inputs, targets, mask=None, rng: np.random.Generator | None = None) -> Tensor:
        """Training loss under the configured output head."""
        cfg = self.config
        if cfg.output_mode == "sampled_softmax":
            return sampled_softmax_loss(self, self.hidden(inputs), targets, cfg.sample_size, rng or np.random.default_rng(), mask)
        return sequence_loss(self.forward(inputs), targets, mask)

    def score_last(self, prefixes) -> np.ndarray:
        """Next-item log-probabilities after each prefix; ``(batch, n)``."""
        x = self._check_items(prefixes)
        if x.ndim == 1:
            x = x[None, :]
        h = self.hidden(x).data[:, -1, :]
        z = h @ self.params.projection.data + self.params.projection_bias.data
        m = z.max(axis=1, keepdims=True)
        return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def sequence_loss(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Summed cross entropy over every unmasked position."""
    tgt = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if tgt.shape != lead:
        raise ContractError(f"targets shape {tgt.shape} does not align with logits {logits.shape}")
    if pad_mask is not None and np.asarray(pad_mask).shape != lead:
        raise ContractError("pad_mask shape does not align with logits")
    n = logits.shape[-1]
    flat = nx.reshape(logits, (-1, n))
    mask = None if pad_mask is None else np.asarray(pad_mask, dtype=bool).reshape(-1)
    return nx.cross_entropy_from_logits(flat, tgt.reshape(-1), mask)


def sample_negatives(targets: np.ndarray, n: int, sample_size: int, rng: np.random.Generator) -> np.ndarray:
    """Per row, ``sample_size`` distinct items from ``1..n-1`` minus the target."""
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    pool = n - 2  # real items other than the target
    keys = rng.random((tgt.size, pool))
    if sample_size < pool:
        pick = np.argpartition(keys, sample_size - 1, axis=1)[:, :sample_size]
    else:
        pick = np.argsort(keys, axis=1)
    items = pick + 1
    return items + (items >= np.maximum(tgt, 1)[:, None])


def sampled_softmax_loss(
    model: NextItNet,
    hidden: Tensor,
    targets,
    sample_size: int,
    rng: np.random.Generator,
    pad_mask=None,
) -> Tensor:
    """Cross entropy of each target against uniformly sampled negatives.

    Falls back to the full softmax when ``sample_size >= n - 1``.
    """
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    n = model.config.vocab_size
    if sample_size >= n - 1:
        log.warning("sample_size %d >= n - 1 = %d; using the full softmax", sample_size, n - 1)
        return sequence_loss(model.project(hidden), targets, pad_mask)
    d = hidden.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = None if pad_mask is None else np.asarray(pad_mask, dtype=bool).reshape(-1)
    # targets under the mask may be padding; give them a harmless stand-in
    live_tgt = tgt if mask is None else np.where(mask, tgt, 1)
    if (live_tgt < 1).any() or (live_tgt >= n).any():
        raise IndexError("sampled softmax targets must be real items")
    negatives = sample_negatives(live_tgt, n, sample_size, rng)
    log_q = math.log(sample_size / (n - 2))
    flat = nx.reshape(hidden, (-1, d))
    return nx.sampled_softmax_xent(flat, model.params.projection, model.params.projection_bias, live_tgt, negatives, log_q, mask)


def top_n(scores: np.ndarray, n_top: int) -> np.ndarray:
    """Indices of the ``n_top`` largest scores, ties broken by ascending index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:n_top]


def predict_next(model: NextItNet, prefix, n_top: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-N real items (padding excluded) after ``prefix`` and their probabilities."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or prefix.size == 0:
        raise ContractError("prefix must be a non-empty 1-D sequence")
    logp = model.score_last(prefix)[0]
    real = logp[1:]
    k = min(max(int(n_top), 0), real.size)
    idx = top_n(real, k)
    return idx + 1, np.exp(real[idx])


def generate(model: NextItNet, prefix, steps: int) -> list[int]:
    """Greedy roll-out: append the top-1 item ``steps`` times."""
    seq = [int(x) for x in prefix]
    out = []
    for _ in range(steps):
        nxt = int(predict_next(model, seq, 1)[0][0])
        out.append(nxt)
        seq.append(nxt)
        if len(seq) > model.config.max_length:
            seq = seq[-model.config.max_length :]
    return out


def count_parameters(params: ModelParameters | NextItNet) -> dict:
    if isinstance(params, NextItNet):
        params = params.params
    per_block = [conv_weight_count(b) for b in params.blocks]
    dilated = []
    for b in params.blocks:
        for c in b.convs:
            if c.kernel_width > 1:
                dilated.append(c.weight_count())
    conv_bias = sum(c.bias.size for b in params.blocks for c in b.convs)
    norms = sum(ln.gain.size + ln.bias.size for b in params.blocks for ln in b.norms)
    out = {
        "embedding": params.embedding.weights.size,
        "blocks": sum(per_block),
        "norms": norms,
        "biases": conv_bias + params.projection_bias.size,
        "projection": params.projection.size,
        "per_block": per_block,
        "per_dilated_conv": dilated,
    }
    out["total"] = out["embedding"] + out["blocks"] + out["norms"] + out["biases"] + out["projection"]
    return out


def measure_receptive_field(model: NextItNet, t: int, seed: int = 0) -> int:
    """Count the input positions whose perturbation changes the last logits row."""
    rng = np.random.default_rng(seed)
    n = model.config.vocab_size
    base = rng.integers(1, n, size=t)
    ref = model.forward(base).data[-1]
    field_size = 0
    for j in range(t):
        x = base.copy()
        x[j] = x[j] % (n - 1) + 1 if n > 2 else PAD
        if not np.array_equal(model.forward(x).data[-1], ref):
            field_size = t - j
            break
    return field_size


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"NXTITNET"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def write_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<HB", len(raw), a.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    pos = len(MAGIC) + 8
    try:
        header = json.loads(body[pos : pos + hlen])
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos : pos + nlen].decode()
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        config = ModelConfig.from_dict({**header["config"], "dilations": tuple(header["config"]["dilations"])})
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint: {e}") from e
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    return Checkpoint(config, tensors, header.get("meta", {}))


def save_checkpoint(model: NextItNet, path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(model.params.state_dict())
    if extra:
        tensors.update(extra)
    write_checkpoint(path, model.config, tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint, config: ModelConfig | None = None) -> NextItNet:
    if config is not None and config != ckpt.config:
        diff = {k: (v, ckpt.config.to_dict()[k]) for k, v in config.to_dict().items() if ckpt.config.to_dict()[k] != v}
        raise CheckpointError(f"architecture mismatch (requested, stored): {diff}")
    model = NextItNet(ckpt.config)
    dt = ckpt.config.np_dtype
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {name!r}: shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(dt)
    return model


def load_checkpoint(path, config: ModelConfig | None = None) -> NextItNet:
    return model_from_checkpoint(read_checkpoint(path), config)
