"""Pyramid pooling at the backbone top and the dense feature pyramid."""
from __future__ import annotations

from typing import Sequence

from .core import Tensor, avg_pool_adaptive, bilinear_resample, concat_channels
from .nn import Conv2d, ConvBNReLU, Module

DEFAULT_BINS = (1, 2, 3, 6)


class PyramidPooling(Module):
    """Adaptive-average-pool branches, upsampled and merged with the input."""

    def __init__(self, in_channels: int, width: int, bins: Sequence[int] = DEFAULT_BINS, rng=None):
        bins = tuple(bins)
        if any(b >= c for b, c in zip(bins, bins[1:])):
            raise ValueError(f"PPM bins must be strictly increasing, got {bins}")
        self.bins = bins
        self.branch = [Conv2d(in_channels, width, k=1, rng=rng) for _ in bins]
        self.merge = ConvBNReLU(in_channels + width * len(bins), width, k=3, rng=rng)

    def pooled(self, x: Tensor) -> list[Tensor]:
        h, w = x.shape[2:]
        for b in self.bins:
            if b > h or b > w:
                raise ValueError(f"PPM bin {b} exceeds top-level extent {h}x{w}")
        return [avg_pool_adaptive(x, b, b) for b in self.bins]

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        parts = [x]
        for conv, p in zip(self.branch, self.pooled(x)):
            parts.append(bilinear_resample(conv(p), h, w))
        return self.merge(concat_channels(parts))


def dfp_inputs(y0: Tensor, fused: Sequence[Tensor], stage: int, literal: bool = False,
               use_context: bool = True) -> list[Tensor]:
    """Inputs consumed by DFP stage ``stage`` (1-based), aligned to that level.

    The inclusive form feeds ``[y0, X~_1, ..., X~_i]``; ``literal`` drops
    ``X~_i`` so stage i sees only the preceding fused levels.
    """
    h, w = fused[stage - 1].shape[2:]
    upto = stage - 1 if literal else stage
    srcs = ([y0] if use_context else []) + list(fused[:upto])
    return [bilinear_resample(t, h, w) for t in srcs]


def dfp_stage_width(stage: int, width: int, literal: bool = False, use_context: bool = True) -> int:
    n = (stage - 1 if literal else stage) + (1 if use_context else 0)
    return n * width


class DenseFeaturePyramid(Module):
    def __init__(self, levels: int, width: int, literal: bool = False, use_context: bool = True, rng=None):
        if literal and not use_context:
            raise ValueError("literal DFP indexing needs the context input for stage 1")
        self.literal = literal
        self.use_context = use_context
        self.width = width
        self.stage = [
            ConvBNReLU(dfp_stage_width(i, width, literal, use_context), width, k=3, rng=rng)
            for i in range(1, levels + 1)
        ]

    def __call__(self, y0: Tensor, fused: Sequence[Tensor]) -> list[Tensor]:
        if len(fused) != len(self.stage):
            raise ValueError(f"DFP built for {len(self.stage)} levels, got {len(fused)}")
        return [
            h(concat_channels(dfp_inputs(y0, fused, i, self.literal, self.use_context)))
            for i, h in enumerate(self.stage, start=1)
        ]


def dfp_collect(ys: Sequence[Tensor], size: tuple[int, int]) -> Tensor:
    """Resample every stage output to ``size`` (the finest level) and concatenate."""
    return concat_channels([bilinear_resample(y, size[0], size[1]) for y in ys])
