"""Embedding, causal dilated convolution, layer norm and the two residual blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float64) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


@dataclass
class EmbeddingTable:
    weights: Tensor  # (n, 2k)

    @classmethod
    def init(cls, n: int, width: int, rng: np.random.Generator, dtype=np.float64) -> "EmbeddingTable":
        return cls(_param(truncated_normal(rng, (n, width), 1.0 / np.sqrt(width), dtype)))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weights", self.weights


def embed(items, table: EmbeddingTable) -> Tensor:
    """Stack the embedding rows of ``items``; shape ``(..., t, 2k)``."""
    return nx.embedding(table.weights, items)


@dataclass
class CausalConv1D:
    kernel: Tensor  # (f, C_in, C_out); tap f-1 reads the current position
    bias: Tensor  # (C_out,)
    dilation: int = 1

    @classmethod
    def init(cls, f: int, c_in: int, c_out: int, dilation: int, rng: np.random.Generator, dtype=np.float64):
        std = np.sqrt(1.0 / (f * c_in))
        return cls(_param(truncated_normal(rng, (f, c_in, c_out), std, dtype)), _param(np.zeros(c_out, dtype)), dilation)

    @property
    def kernel_width(self) -> int:
        return self.kernel.shape[0]

    @property
    def padding(self) -> int:
        return (self.kernel_width - 1) * self.dilation

    def filter_taps(self) -> np.ndarray:
        """Kernel reordered so that index ``i`` multiplies ``x[h - dilation * i]``."""
        return self.kernel.data[::-1]

    def weight_count(self) -> int:
        return self.kernel.size

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "kernel", self.kernel
        yield prefix + "bias", self.bias


def causal_conv(x: Tensor, layer: CausalConv1D) -> Tensor:
    return nx.conv1d_causal(x, layer.kernel, layer.bias, layer.dilation)


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-8

    @classmethod
    def init(cls, channels: int, eps: float = 1e-8, dtype=np.float64) -> "LayerNorm":
        return cls(_param(np.ones(channels, dtype)), _param(np.zeros(channels, dtype)), eps)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "gain", self.gain
        yield prefix + "bias", self.bias


def layer_norm_apply(x: Tensor, ln: LayerNorm) -> Tensor:
    if x.shape[-1] < 2:
        raise DimensionError("layer norm needs at least two channels")
    return nx.layer_norm(x, ln.gain, ln.bias, ln.eps)


def _norm_act(x: Tensor, ln: LayerNorm) -> Tensor:
    return nx.relu(layer_norm_apply(x, ln))


@dataclass
class ResidualBlockA:
    """Bottleneck block: 1x1 down to k, dilated 1x3 at k, 1x1 back up to 2k."""

    conv_down: CausalConv1D
    conv_dilated: CausalConv1D
    conv_up: CausalConv1D
    norms: tuple[LayerNorm, LayerNorm, LayerNorm]

    @classmethod
    def init(cls, k: int, dilation: int, rng: np.random.Generator, f: int = 3, eps: float = 1e-8, dtype=np.float64):
        return cls(
            CausalConv1D.init(1, 2 * k, k, 1, rng, dtype),
            CausalConv1D.init(f, k, k, dilation, rng, dtype),
            CausalConv1D.init(1, k, 2 * k, 1, rng, dtype),
            (LayerNorm.init(2 * k, eps, dtype), LayerNorm.init(k, eps, dtype), LayerNorm.init(k, eps, dtype)),
        )

    @property
    def channels(self) -> int:
        return self.conv_down.kernel.shape[1]

    @property
    def convs(self) -> tuple[CausalConv1D, ...]:
        return (self.conv_down, self.conv_dilated, self.conv_up)

    @property
    def dilations(self) -> tuple[int, ...]:
        return (self.conv_dilated.dilation,)

    def residual_mapping(self, x: Tensor) -> Tensor:
        h = causal_conv(_norm_act(x, self.norms[0]), self.conv_down)
        h = causal_conv(_norm_act(h, self.norms[1]), self.conv_dilated)
        return causal_conv(_norm_act(h, self.norms[2]), self.conv_up)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv_down.named_parameters(prefix + "conv_down.")
        yield from self.conv_dilated.named_parameters(prefix + "conv_dilated.")
        yield from self.conv_up.named_parameters(prefix + "conv_up.")
        for i, ln in enumerate(self.norms):
            yield from ln.named_parameters(f"{prefix}norm{i}.")


@dataclass
class ResidualBlockB:
    """Two full-width dilated 1x3 convolutions under one skip connection."""

    conv1: CausalConv1D
    conv2: CausalConv1D
    norms: tuple[LayerNorm, LayerNorm]

    @classmethod
    def init(cls, k: int, dilations: tuple[int, int], rng: np.random.Generator, f: int = 3, eps: float = 1e-8, dtype=np.float64):
        c = 2 * k
        return cls(
            CausalConv1D.init(f, c, c, dilations[0], rng, dtype),
            CausalConv1D.init(f, c, c, dilations[1], rng, dtype),
            (LayerNorm.init(c, eps, dtype), LayerNorm.init(c, eps, dtype)),
        )

    @property
    def channels(self) -> int:
        return self.conv1.kernel.shape[1]

    @property
    def convs(self) -> tuple[CausalConv1D, ...]:
        return (self.conv1, self.conv2)

    @property
    def dilations(self) -> tuple[int, ...]:
        return (self.conv1.dilation, self.conv2.dilation)

    def residual_mapping(self, x: Tensor) -> Tensor:
        h = _norm_act(causal_conv(x, self.conv1), self.norms[0])
        return _norm_act(causal_conv(h, self.conv2), self.norms[1])

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_parameters(prefix + "conv1.")
        yield from self.conv2.named_parameters(prefix + "conv2.")
        for i, ln in enumerate(self.norms):
            yield from ln.named_parameters(f"{prefix}norm{i}.")


ResidualBlock = ResidualBlockA | ResidualBlockB


def residual_forward(x: Tensor, block: ResidualBlock, skip: bool = True) -> Tensor:
    """``x + F(x)``; with ``skip=False`` only ``F(x)`` (the no-residual ablation)."""
    if x.shape[-1] != block.channels:
        raise DimensionError(f"block expects {block.channels} channels, got {x.shape[-1]}")
    fx = block.residual_mapping(x)
    return nx.add(x, fx) if skip else fx


def conv_weight_count(block: ResidualBlock) -> int:
    """Learnable convolution weights, biases and norm parameters excluded."""
    return sum(c.weight_count() for c in block.convs)


def receptive_field(kernel_width: int, dilations) -> int:
    """Closed-form field of a chain of causal convolutions."""
    return 1 + (kernel_width - 1) * int(sum(dilations))


def one_dim_transform(e: Tensor) -> Tensor:
    """``t x 2k`` -> ``1 x t x 2k`` so the channel axis is the embedding axis."""
    if len(e.shape) != 2:
        raise DimensionError(f"expected a t x 2k matrix, got {e.shape}")
    return nx.reshape(e, (1,) + e.shape)


def one_dim_inverse(t3: Tensor) -> Tensor:
    if len(t3.shape) != 3 or t3.shape[0] != 1:
        raise DimensionError(f"expected a 1 x t x 2k tensor, got {t3.shape}")
    return nx.reshape(t3, t3.shape[1:])
