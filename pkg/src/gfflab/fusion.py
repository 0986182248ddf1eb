"""Level alignment and the multi-level fusion strategies.

Every strategy maps a reduced pyramid ``[X_1, ..., X_L]`` (finest first,
all at the common channel width) to one fused map per level. Fusion is
split into a pure "pre-refinement" combination, exposed for inspection
and testing, and a per-level refinement stack of two 3x3 conv blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Tensor, bilinear_resample, concat_channels, conv2d, sigmoid
from .nn import Conv2d, ConvBNReLU, Module, Sequential

STRATEGIES = ("concat", "addition", "fpn", "gated_fpn", "gff")
GATED = ("gated_fpn", "gff")


def align_to_level(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resample ``x`` to the spatial ``size`` of the receiving level."""
    return bilinear_resample(x, size[0], size[1])


def check_pyramid(levels: Sequence[Tensor]):
    if not levels:
        raise ValueError("empty feature pyramid")
    n = levels[0].shape[0]
    for lo, hi in zip(levels, levels[1:]):
        if hi.shape[2] > lo.shape[2] or hi.shape[3] > lo.shape[3]:
            raise ValueError(f"pyramid resolution must not increase with depth: {lo.shape} -> {hi.shape}")
    if any(t.shape[0] != n for t in levels):
        raise ValueError("pyramid levels disagree on batch extent")


def compute_gate(x: Tensor, gate_conv: Conv2d) -> Tensor:
    """G = sigmoid(1x1 conv(x)), a single-channel map in [0, 1]."""
    if gate_conv.weight.shape[0] != 1 or gate_conv.weight.shape[2:] != (1, 1):
        raise ValueError("gate conv must be 1x1 with one output channel")
    return sigmoid(conv2d(x, gate_conv.weight, gate_conv.bias))


def constant_gate(like: Tensor, value: float) -> Tensor:
    n, _, h, w = like.shape
    return Tensor(np.full((n, 1, h, w), value, dtype=like.dtype))


def _size(t: Tensor) -> tuple[int, int]:
    return t.shape[2], t.shape[3]


def concat_at(levels: Sequence[Tensor], l: int) -> Tensor:
    size = _size(levels[l])
    return concat_channels([align_to_level(x, size) for x in levels])


def addition_at(levels: Sequence[Tensor], l: int) -> Tensor:
    size = _size(levels[l])
    out = align_to_level(levels[0], size)
    for x in levels[1:]:
        out = out + align_to_level(x, size)
    return out


def fpn_top_down(levels: Sequence[Tensor]) -> list[Tensor]:
    fused = [None] * len(levels)
    fused[-1] = levels[-1]
    for l in range(len(levels) - 2, -1, -1):
        fused[l] = align_to_level(fused[l + 1], _size(levels[l])) + levels[l]
    return fused


def gated_fpn_top_down(levels: Sequence[Tensor], gates: Sequence[Tensor]) -> list[Tensor]:
    """Duplex gate restricted to the single top-down edge l+1 -> l."""
    fused = [None] * len(levels)
    fused[-1] = levels[-1]
    for l in range(len(levels) - 2, -1, -1):
        size = _size(levels[l])
        sent = align_to_level(gates[l + 1], size) * align_to_level(fused[l + 1], size)
        fused[l] = (1.0 + gates[l]) * levels[l] + (1.0 - gates[l]) * sent
    return fused


def gff_at(levels: Sequence[Tensor], gates: Sequence[Tensor], l: int) -> Tensor:
    """(1 + G_l) X_l + (1 - G_l) * sum_{i != l} G_i X_i, summed in ascending i."""
    size = _size(levels[l])
    received = None
    for i, (x, g) in enumerate(zip(levels, gates)):
        if i == l:
            continue
        term = align_to_level(g, size) * align_to_level(x, size)
        received = term if received is None else received + term
    own = (1.0 + gates[l]) * levels[l]
    if received is None:
        return own
    return own + (1.0 - gates[l]) * received


def gff_all(levels: Sequence[Tensor], gates: Sequence[Tensor]) -> list[Tensor]:
    return [gff_at(levels, gates, l) for l in range(len(levels))]


@dataclass
class FusionResult:
    reduced: list
    pre_refine: list
    fused: list
    gates: list = field(default_factory=list)


class Fusion(Module):
    """Channel reduction, optional gates, a fusion strategy and per-level refinement."""

    def __init__(self, in_channels: Sequence[int], width: int, strategy: str, rng):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {strategy!r}; choose from {STRATEGIES}")
        self.strategy = strategy
        self.width = width
        self.num_levels = len(in_channels)
        self.reduce = [ConvBNReLU(c, width, k=1, rng=rng) for c in in_channels]
        self.gate = [Conv2d(width, 1, k=1, zero_init=True) for _ in in_channels] if strategy in GATED else []
        refine_in = width * self.num_levels if strategy == "concat" else width
        self.refine = [
            Sequential(ConvBNReLU(refine_in, width, rng=rng), ConvBNReLU(width, width, rng=rng))
            for _ in in_channels
        ]

    def gates_for(self, reduced: Sequence[Tensor], override: Optional[Mapping[int, float]] = None):
        override = override or {}
        for level in override:
            if not 1 <= level <= self.num_levels:
                raise IndexError(f"gate level {level} out of range 1..{self.num_levels}")
        return [
            constant_gate(x, override[l + 1]) if (l + 1) in override else compute_gate(x, conv)
            for l, (x, conv) in enumerate(zip(reduced, self.gate))
        ]

    def combine(self, reduced: Sequence[Tensor], gates: Sequence[Tensor]) -> list[Tensor]:
        s = self.strategy
        if s == "concat":
            return [concat_at(reduced, l) for l in range(len(reduced))]
        if s == "addition":
            return [addition_at(reduced, l) for l in range(len(reduced))]
        if s == "fpn":
            return fpn_top_down(reduced)
        if s == "gated_fpn":
            return gated_fpn_top_down(reduced, gates)
        return gff_all(reduced, gates)

    def __call__(self, pyramid: Sequence[Tensor], gate_override=None) -> FusionResult:
        check_pyramid(pyramid)
        if len(pyramid) != self.num_levels:
            raise ValueError(f"expected {self.num_levels} levels, got {len(pyramid)}")
        reduced = [r(x) for r, x in zip(self.reduce, pyramid)]
        if self.gate:
            gates = self.gates_for(reduced, gate_override)
        else:
            if gate_override:
                raise ValueError(f"strategy {self.strategy!r} has no gates to override")
            gates = []
        pre = self.combine(reduced, gates)
        fused = [r(x) for r, x in zip(self.refine, pre)]
        return FusionResult(reduced, pre, fused, gates)
