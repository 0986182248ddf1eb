"""Desk-scale backbone and full model assembly.

Wiring: backbone -> 1x1 reductions -> PPM on the top level (y0) -> fusion
over all levels -> per-level refinement -> DFP (optional) -> collect at the
finest level -> 1x1 classifier -> bilinear upsample to the input size. An
auxiliary 1x1 classifier reads the stage-3 backbone feature.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .context import DEFAULT_BINS, DenseFeaturePyramid, PyramidPooling, dfp_collect
from .core import Tensor, bilinear_resample, io
from .core.tensor import walk_graph
from .fusion import GATED, STRATEGIES, Fusion
from .nn import Conv2d, ConvBNReLU, Module, Sequential

STAGE_STRIDES = (2, 4, 8, 8)


@dataclass
class ModelConfig:
    classes: int = 5
    width: int = 32
    fusion: str = "gff"
    dfp: bool = True
    dfp_literal_indexing: bool = False
    aux_weight: float = 0.4
    backbone_widths: tuple = (16, 32, 64, 128)
    ppm_bins: tuple = DEFAULT_BINS
    levels: int = 4

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.ppm_bins = tuple(int(b) for b in self.ppm_bins)
        if self.fusion not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion!r}; choose from {STRATEGIES}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.aux_weight < 0:
            raise ValueError("aux weight must be non-negative")
        if self.levels != 4 or len(self.backbone_widths) != 4:
            raise ValueError("the desk backbone emits exactly 4 levels")
        if self.width < 1:
            raise ValueError("common width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Backbone(Module):
    """Stem plus four stages of two 3x3 conv blocks; stage 4 is dilated."""

    def __init__(self, widths: Sequence[int], rng):
        w1, w2, w3, w4 = widths
        self.stem = ConvBNReLU(3, w1, stride=2, rng=rng)
        self.stage = [
            Sequential(ConvBNReLU(w1, w1, rng=rng), ConvBNReLU(w1, w1, rng=rng)),
            Sequential(ConvBNReLU(w1, w2, stride=2, rng=rng), ConvBNReLU(w2, w2, rng=rng)),
            Sequential(ConvBNReLU(w2, w3, stride=2, rng=rng), ConvBNReLU(w3, w3, rng=rng)),
            Sequential(ConvBNReLU(w3, w4, dilation=2, rng=rng), ConvBNReLU(w4, w4, dilation=2, rng=rng)),
        ]

    def __call__(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[2:]
        if h % 8 or w % 8:
            raise ValueError(f"input size {h}x{w} must be divisible by 8")
        x = self.stem(image)
        levels = []
        for stage in self.stage:
            x = stage(x)
            levels.append(x)
        return levels


@dataclass
class ModelOutput:
    logits: Tensor
    aux_logits: Tensor
    gates: list = field(default_factory=list)
    fused: list = field(default_factory=list)
    pre_refine: list = field(default_factory=list)
    reduced: list = field(default_factory=list)
    pyramid: list = field(default_factory=list)
    context: Optional[Tensor] = None
    dfp: list = field(default_factory=list)


class GFFNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.backbone = Backbone(c.backbone_widths, rng)
        self.ppm = PyramidPooling(c.backbone_widths[-1], c.width, c.ppm_bins, rng=rng)
        self.fusion = Fusion(c.backbone_widths, c.width, c.fusion, rng)
        self.dfp = DenseFeaturePyramid(c.levels, c.width, c.dfp_literal_indexing, rng=rng) if c.dfp else None
        head_in = c.width * (c.levels if c.dfp else c.levels + 1)
        # small head weights keep the initial softmax near uniform
        self.classifier = Conv2d(head_in, c.classes, k=1, rng=rng, init_scale=0.01)
        self.aux = Conv2d(c.backbone_widths[2], c.classes, k=1, rng=rng, init_scale=0.01)

    def __call__(self, image: Tensor, gate_override=None) -> ModelOutput:
        h, w = image.shape[2:]
        pyramid = self.backbone(image)
        y0 = self.ppm(pyramid[-1])
        fr = self.fusion(pyramid, gate_override)
        finest = fr.fused[0].shape[2:]
        if self.dfp is not None:
            ys = self.dfp(y0, fr.fused)
            head_in = dfp_collect(ys, finest)
        else:
            ys = []
            head_in = dfp_collect([y0] + fr.fused, finest)
        logits = bilinear_resample(self.classifier(head_in), h, w)
        aux = bilinear_resample(self.aux(pyramid[2]), h, w)
        return ModelOutput(logits, aux, fr.gates, fr.fused, fr.pre_refine, fr.reduced, pyramid, y0, ys)


def build_model(config: ModelConfig, seed_or_rng=0) -> GFFNet:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return GFFNet(config, rng)


# -- cost accounting -------------------------------------------------------------

def _conv_cost(cin, cout, k, hw):
    return cout * cin * k * k + cout, cout * hw * cin * k * k


def _resample_macs(channels, src, dst):
    return 0 if src == dst else 4 * channels * dst[0] * dst[1]


def count_params_flops(config: ModelConfig, in_h: int, in_w: int) -> tuple[int, int]:
    """Closed-form (parameter count, multiply-accumulates) for one image.

    Convolutions cost ``Cout*H'*W'*Cin*kh*kw`` MACs and bilinear resampling
    4 MACs per output element; pooling and pointwise ops are not counted.
    """
    c = config
    C, K = c.width, c.classes
    sizes = [(in_h // s, in_w // s) for s in STAGE_STRIDES]
    area = [h * w for h, w in sizes]
    params = macs = 0

    def conv(cin, cout, k, hw, bn=True):
        nonlocal params, macs
        p, m = _conv_cost(cin, cout, k, hw)
        params += p + (2 * cout if bn else 0)
        macs += m

    def resample(ch, src, dst):
        nonlocal macs
        macs += _resample_macs(ch, src, dst)

    w1, w2, w3, w4 = c.backbone_widths
    conv(3, w1, 3, area[0])
    conv(w1, w1, 3, area[0]); conv(w1, w1, 3, area[0])
    conv(w1, w2, 3, area[1]); conv(w2, w2, 3, area[1])
    conv(w2, w3, 3, area[2]); conv(w3, w3, 3, area[2])
    conv(w3, w4, 3, area[3]); conv(w4, w4, 3, area[3])

    for b in c.ppm_bins:
        conv(w4, C, 1, b * b, bn=False)
        resample(C, (b, b), sizes[3])
    conv(w4 + C * len(c.ppm_bins), C, 3, area[3])

    L = c.levels
    for i, wi in enumerate(c.backbone_widths):
        conv(wi, C, 1, area[i])
    if c.fusion in GATED:
        for i in range(L):
            conv(C, 1, 1, area[i], bn=False)
    for l in range(L):
        if c.fusion in ("concat", "addition"):
            for i in range(L):
                resample(C, sizes[i], sizes[l])
        elif c.fusion == "fpn" and l < L - 1:
            resample(C, sizes[l + 1], sizes[l])
        elif c.fusion == "gated_fpn" and l < L - 1:
            resample(1, sizes[l + 1], sizes[l])
            resample(C, sizes[l + 1], sizes[l])
        elif c.fusion == "gff":
            for i in range(L):
                if i != l:
                    resample(1, sizes[i], sizes[l])
                    resample(C, sizes[i], sizes[l])
    refine_in = C * L if c.fusion == "concat" else C
    for l in range(L):
        conv(refine_in, C, 3, area[l])
        conv(C, C, 3, area[l])

    if c.dfp:
        for stage in range(1, L + 1):
            l = stage - 1
            upto = stage - 1 if c.dfp_literal_indexing else stage
            resample(C, sizes[3], sizes[l])
            for j in range(upto):
                resample(C, sizes[j], sizes[l])
            conv(C * (upto + 1), C, 3, area[l])
        collected = list(range(L))
        for l in collected:
            resample(C, sizes[l], sizes[0])
        head_in = C * L
    else:
        resample(C, sizes[3], sizes[0])
        for l in range(L):
            resample(C, sizes[l], sizes[0])
        head_in = C * (L + 1)
    conv(head_in, K, 1, area[0], bn=False)
    resample(K, sizes[0], (in_h, in_w))
    conv(w3, K, 1, area[2], bn=False)
    resample(K, sizes[2], (in_h, in_w))
    return params, macs


def recount_by_traversal(model: GFFNet, in_h: int, in_w: int) -> tuple[int, int]:
    """Count parameters and MACs by walking the autodiff graph of one forward pass."""
    was_training = model.training
    model.eval()
    image = Tensor(np.zeros((1, 3, in_h, in_w), dtype=model.classifier.weight.dtype))
    out = model(image)
    model.train(was_training)
    root = out.logits.sum() + out.aux_logits.sum()
    macs = 0
    leaves = {}
    for node in walk_graph(root):
        for t in node.inputs:
            if t.node is None and t.requires_grad:
                leaves[id(t)] = t.size
        if node.name == "conv2d":
            x, w = node.inputs[0], node.inputs[1]
            n, cout, ho, wo = node.out_shape
            macs += n * cout * ho * wo * x.shape[1] * w.shape[2] * w.shape[3]
        elif node.name == "bilinear_resample":
            macs += 4 * int(np.prod(node.out_shape))
    return sum(leaves.values()), macs


# -- checkpoints -------------------------------------------------------------------

MANIFEST = "manifest.txt"


class CheckpointError(ValueError):
    pass


def _fname(name: str) -> str:
    return f"{name}.gfft"


def save_checkpoint(model: Module, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in model.state():
        io.save(d / _fname(name), arr)
        lines.append(f"{name} {'x'.join(str(s) for s in arr.shape) or 'scalar'}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def load_checkpoint(model: Module, directory):
    """Copy checkpoint arrays into ``model`` after verifying every name and shape."""
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    entries = [ln.split() for ln in mpath.read_text().splitlines() if ln.strip()]
    state = model.state()
    if [e[0] for e in entries] != [n for n, _ in state]:
        raise CheckpointError("checkpoint parameter names do not match the model configuration")
    for (name, dims), (_, arr) in zip(entries, state):
        shape = () if dims == "scalar" else tuple(int(s) for s in dims.split("x"))
        if shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {shape} != model shape {arr.shape}")
        data = io.load(d / _fname(name))
        if data.shape != shape:
            raise CheckpointError(f"{name}: tensor file shape {data.shape} != manifest {shape}")
        arr[...] = data
    return model
