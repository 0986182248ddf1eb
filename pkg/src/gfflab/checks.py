"""Gradient-check suites shared by the CLI and the test-suite."""
from __future__ import annotations

import numpy as np

from .core import (
    RunningStats, no_grad, Tensor, avg_pool_adaptive, batch_norm, bilinear_resample, concat_channels, conv2d,
    gradcheck, mul, precision, relu, sigmoid, slice_channels, softmax_cross_entropy,
)
from .core.gradcheck import GradcheckReport, gradcheck_report
from .core.tensor import walk_graph
from .fusion import gated_fpn_top_down, gff_all
from .network import ModelConfig, build_model

MICRO = dict(classes=2, width=4, fusion="gff", dfp=True, backbone_widths=(4, 4, 4, 4), ppm_bins=(1,))


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values off relu's kink so finite differences stay on one side."""
    return np.where(np.abs(a) < margin, np.sign(a + 1e-300) * margin + a, a)


def op_gradchecks(seed: int = 0, eps: float = 1e-3) -> dict:
    """Max relative gradient error for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = lambda *s: Tensor(rng.standard_normal(s))  # noqa: E731
    results = {}
    with precision("bits64"):
        a, b = r(2, 4, 6, 6), r(2, 4, 6, 6)
        g1 = r(2, 1, 6, 6)
        results["add"] = gradcheck(lambda a, b: a + b, [a, b], eps)
        results["add_channel_broadcast"] = gradcheck(lambda a, g: a + g, [a, g1], eps)
        results["mul"] = gradcheck(lambda a, b: a * b, [a, b], eps)
        results["mul_channel_broadcast"] = gradcheck(lambda a, g: mul(g, a), [a, g1], eps)
        results["scalar_ops"] = gradcheck(lambda a: (1.0 - a) * 3.0 + 2.0, [a], eps)
        x, w, bias = r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)
        results["conv2d"] = gradcheck(lambda x, w, b: conv2d(x, w, b, 1, 1, 1), [x, w, bias], eps)
        results["conv2d_strided"] = gradcheck(lambda x, w, b: conv2d(x, w, b, 2, 1, 1), [x, w, bias], eps)
        results["conv2d_dilated"] = gradcheck(lambda x, w, b: conv2d(x, w, b, 1, 2, 2), [x, w, bias], eps)
        results["sigmoid"] = gradcheck(sigmoid, [r(2, 4, 6, 6)], eps)
        results["relu"] = gradcheck(relu, [Tensor(_away_from_zero(rng.standard_normal((2, 4, 6, 6))))], eps)
        results["bilinear_up"] = gradcheck(lambda x: bilinear_resample(x, 11, 9), [r(2, 3, 5, 4)], eps)
        results["bilinear_down"] = gradcheck(lambda x: bilinear_resample(x, 3, 2), [r(2, 3, 6, 6)], eps)
        results["avg_pool_adaptive"] = gradcheck(lambda x: avg_pool_adaptive(x, 4, 3), [r(2, 3, 6, 6)], eps)
        stats = RunningStats.fresh(4, np.float64)
        gamma, beta = r(4), r(4)
        results["batch_norm_train"] = gradcheck(
            lambda x, g, b: batch_norm(x, g, b, stats, True), [r(2, 4, 6, 6), gamma, beta], eps)
        results["batch_norm_eval"] = gradcheck(
            lambda x, g, b: batch_norm(x, g, b, stats, False), [r(2, 4, 6, 6), gamma, beta], eps)
        results["concat_channels"] = gradcheck(
            lambda a, b: concat_channels([a, b]), [r(2, 2, 5, 5), r(2, 3, 5, 5)], eps)
        results["slice_channels"] = gradcheck(lambda a: slice_channels(a, 1, 3), [r(2, 4, 5, 5)], eps)
        labels = rng.integers(0, 3, (2, 5, 5))
        labels[0, 0, :2] = 255
        results["softmax_cross_entropy"] = gradcheck(
            lambda z: softmax_cross_entropy(z, labels), [r(2, 3, 5, 5)], eps)
        chain = lambda x, w, g: mul(sigmoid(conv2d(x, w, None, 1, 1, 1)), g)  # noqa: E731
        results["conv_sigmoid_mul"] = gradcheck(chain, [r(2, 3, 6, 6), r(1, 3, 3, 3), r(2, 4, 6, 6)], eps)
        levels = [r(2, 3, 8, 8), r(2, 3, 4, 4), r(2, 3, 2, 2), r(2, 3, 2, 2)]
        gates = [sigmoid(r(2, 1, t.shape[2], t.shape[3])) for t in levels]
        gate_leaves = [Tensor(g.data.copy()) for g in gates]
        results["gff_fusion"] = gradcheck(
            lambda *ts: concat_channels([bilinear_resample(t, 8, 8) for t in gff_all(ts[:4], ts[4:])]),
            levels + gate_leaves, eps)
        results["gated_fpn_fusion"] = gradcheck(
            lambda *ts: concat_channels([bilinear_resample(t, 8, 8) for t in gated_fpn_top_down(ts[:4], ts[4:])]),
            levels + gate_leaves, eps)
    return results


def micro_model(seed: int = 0):
    with precision("bits64"):
        return build_model(ModelConfig(**MICRO), np.random.default_rng(seed))


def relu_pattern(out: Tensor) -> np.ndarray:
    """Sign pattern of every relu input reachable from ``out``."""
    parts = [(n.inputs[0].data > 0).ravel() for n in walk_graph(out) if n.name == "relu"]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def micro_model_gradcheck(seed: int = 0, eps: float = 1e-3, max_coords: int = 8) -> GradcheckReport:
    """End-to-end check: 8x8 input, K=2, width 4, gff + DFP, 64-bit.

    Checked with respect to the image and every parameter tensor (all image
    coordinates, up to ``max_coords`` sampled coordinates per parameter).
    Batch norm runs on running statistics taken from one training-mode pass:
    with two samples and 1x1 deep levels, training-mode normalisation is too
    sharply curved for a 1e-3 central difference, and its backward rule is
    already checked on its own by :func:`op_gradchecks`. Coordinates whose
    stencil flips a relu sign are skipped and counted.
    """
    rng = np.random.default_rng(seed + 1)
    with precision("bits64"):
        model = micro_model(seed)
        # non-zero gate weights so the gate path carries curvature
        for conv in model.fusion.gate:
            conv.weight.data[...] = rng.normal(0, 0.5, conv.weight.shape)
        model.classifier.weight.data[...] = rng.normal(0, 0.5, model.classifier.weight.shape)
        model.aux.weight.data[...] = rng.normal(0, 0.5, model.aux.weight.shape)
        image = Tensor(rng.standard_normal((2, 3, 8, 8)))
        labels = rng.integers(0, 2, (2, 8, 8))
        with no_grad():
            model.train()(image)
        model.eval()
        params = model.parameters()

        def loss(*_):
            out = model(image)
            return softmax_cross_entropy(out.logits, labels) + 0.4 * softmax_cross_entropy(out.aux_logits, labels)

        report = gradcheck_report(loss, [image], eps, guard=relu_pattern)
        rest = gradcheck_report(loss, params, eps, max_coords=max_coords, guard=relu_pattern)
    return GradcheckReport(max(report.max_error, rest.max_error), report.checked + rest.checked,
                           report.skipped + rest.skipped)
