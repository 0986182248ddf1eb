"""Gate-map export (binary PGM) and gate ablation reports."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import no_grad
from .data import CLASS_NAMES, IGNORE_LABEL
from .fusion import GATED
from .metrics import ConfusionMatrix, argmax_predict, per_class_iou
from .network import GFFNet
from .training import to_input

_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM export expects a 2-D uint8 array")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = _PGM_HEADER.match(buf)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    body = buf[m.end():]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def quantize(gate: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.asarray(gate, dtype=np.float64)).astype(np.uint8)


def has_gates(model: GFFNet) -> bool:
    return model.config.fusion in GATED


def gate_maps(model: GFFNet, images: np.ndarray) -> list[np.ndarray]:
    """Per-level gate values [N, H_l, W_l] for a batch of images."""
    model.eval()
    with no_grad():
        out = model(to_input(images, model.classifier.weight.dtype))
    return [g.data[:, 0] for g in out.gates]


def export_gates(model: GFFNet, samples, out_dir) -> list[dict]:
    """Write ``gate_L{i}_{sample}.pgm`` per level and sample; return per-level stats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = gate_maps(model, np.stack([s.image for s in samples]))
    stats = []
    for lvl, g in enumerate(maps, start=1):
        for s, gm in zip(samples, g):
            write_pgm(out / f"gate_L{lvl}_{s.id}.pgm", quantize(gm))
        stats.append({"level": lvl, "mean": float(g.mean()), "std": float(g.std())})
    return stats


@dataclass
class AblationReport:
    levels: tuple
    changed: list          # per-sample changed pixel counts
    total_pixels: int
    iou_before: list
    iou_after: list
    masks: list

    @property
    def changed_fraction(self) -> float:
        return sum(self.changed) / self.total_pixels

    def delta(self) -> list:
        return [None if a is None or b is None else b - a for a, b in zip(self.iou_before, self.iou_after)]


def _predict(model, images, override):
    model.eval()
    with no_grad():
        out = model(to_input(images, model.classifier.weight.dtype), override)
    return argmax_predict(out.logits)


def ablate_gate(model: GFFNet, samples: Sequence, levels, batch: int = 16) -> AblationReport:
    """Compare predictions with learned gates against gates forced to zero at ``levels`` (1-based)."""
    if not has_gates(model):
        raise ValueError(f"fusion {model.config.fusion!r} has no gates")
    levels = tuple(levels)
    L = model.config.levels
    for lvl in levels:
        if not 1 <= lvl <= L:
            raise IndexError(f"gate level {lvl} out of range 1..{L}")
    override = {lvl: 0.0 for lvl in levels}
    k = model.config.classes
    before, after = ConfusionMatrix(k), ConfusionMatrix(k)
    changed, masks = [], []
    total = 0
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        imgs = np.stack([s.image for s in chunk])
        p0 = _predict(model, imgs, None)
        p1 = _predict(model, imgs, override)
        for s, a, b in zip(chunk, p0, p1):
            before.accumulate(a, s.labels, IGNORE_LABEL)
            after.accumulate(b, s.labels, IGNORE_LABEL)
            diff = a != b
            changed.append(int(diff.sum()))
            masks.append(diff)
            total += diff.size
    return AblationReport(levels, changed, total, per_class_iou(before), per_class_iou(after), masks)


def write_ablation(report: AblationReport, samples, out_dir, names=CLASS_NAMES):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "changed_pixels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample", "changed"])
        for s, c in zip(samples, report.changed):
            w.writerow([s.id, c])
    with open(out / "iou_delta.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "iou_gated", "iou_ablated", "delta"])
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        for name, a, b, d in zip(names, report.iou_before, report.iou_after, report.delta()):
            w.writerow([name, fmt(a), fmt(b), fmt(d)])
    for s, m in zip(samples, report.masks):
        write_pgm(out / f"changed_{s.id}.pgm", (m * 255).astype(np.uint8))
