"""Optimizer, poly schedule, augmentation, the training loop and inference."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Tensor, no_grad, softmax, softmax_cross_entropy
from .core.ops import bilinear_weights
from .data import IGNORE_LABEL, SegmentationSample
from .metrics import ConfusionMatrix, argmax_predict
from .network import GFFNet, ModelConfig, build_model, save_checkpoint
from .seeding import stream

log = logging.getLogger(__name__)

MULTISCALE = (0.75, 1.0, 1.25, 1.5, 1.75)
LOG_HEADER = ("iter", "lr", "loss_main", "loss_aux", "loss_total")


def poly_lr(it: int, total: int, base: float, power: float = 0.9) -> float:
    if total <= 0 or not 0 <= it <= total:
        raise ValueError(f"poly_lr needs 0 <= iter <= total and total > 0 (got {it}, {total})")
    return base * (1.0 - it / total) ** power


# -- optimizer -------------------------------------------------------------------

def decays(name: str) -> bool:
    """Weight decay applies to conv weights only, never to biases or BN affine terms."""
    return not name.endswith((".bias", ".gamma", ".beta"))


@dataclass
class OptimState:
    total: int
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    iteration: int = 0
    velocity: dict = field(default_factory=dict)

    def lr(self) -> float:
        return poly_lr(self.iteration, self.total, self.base_lr, self.power)


def sgd_step(named_params, state: OptimState, lr: float | None = None):
    """v <- momentum*v + grad + decay*param;  param <- param - lr*v."""
    if state.iteration >= state.total:
        raise ValueError("optimizer already ran its scheduled number of iterations")
    lr = state.lr() if lr is None else lr
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        step = g + state.weight_decay * p.data if decays(name) else g
        v = state.momentum * v + step
        state.velocity[name] = v
        p.data -= lr * v
    state.iteration += 1


# -- augmentation ------------------------------------------------------------------

@dataclass
class AugmentConfig:
    crop: tuple = (64, 64)
    flip_prob: float = 0.5
    jitter: float = 10.0
    scale_range: tuple = (0.75, 2.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale range must be positive and ordered")


def resize_image(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] (or [N, C, H, W]) array, half-pixel centers."""
    h, w = img.shape[-2:]
    if (h, w) == (oh, ow):
        return img.copy()
    ry = bilinear_weights(h, oh).astype(img.dtype)
    rx = bilinear_weights(w, ow).astype(img.dtype)
    return np.matmul(np.matmul(ry, img), rx.T)


def resize_labels(lbl: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Nearest-neighbour resize; never invents label values."""
    h, w = lbl.shape
    ys = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return lbl[ys][:, xs]


def augment(sample: SegmentationSample, cfg: AugmentConfig, rng: np.random.Generator) -> SegmentationSample:
    """Scale, flip, jitter, crop (in that order)."""
    img, lbl = sample.image, sample.labels
    h, w = lbl.shape

    s = rng.uniform(*cfg.scale_range)
    oh, ow = max(1, int(round(h * s))), max(1, int(round(w * s)))
    img = resize_image(img, oh, ow)
    lbl = resize_labels(lbl, oh, ow)

    if rng.random() < cfg.flip_prob:
        img = img[:, :, ::-1]
        lbl = lbl[:, ::-1]

    jitter = rng.uniform(-cfg.jitter, cfg.jitter, size=(img.shape[0], 1, 1))
    img = np.clip(img + jitter, 0, 255)

    ch, cw = cfg.crop
    ph, pw = max(ch - oh, 0), max(cw - ow, 0)
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)))
        lbl = np.pad(lbl, ((0, ph), (0, pw)), constant_values=IGNORE_LABEL)
    y0 = int(rng.integers(0, img.shape[1] - ch + 1))
    x0 = int(rng.integers(0, img.shape[2] - cw + 1))
    img = img[:, y0:y0 + ch, x0:x0 + cw]
    lbl = lbl[y0:y0 + ch, x0:x0 + cw]
    return SegmentationSample(np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lbl), sample.id)


def flip(sample: SegmentationSample) -> SegmentationSample:
    return SegmentationSample(sample.image[:, :, ::-1].copy(), sample.labels[:, ::-1].copy(), sample.id)


# -- training --------------------------------------------------------------------

def to_input(images: np.ndarray, dtype=np.float32) -> Tensor:
    """Map [0, 255] pixels to roughly unit-scale network input."""
    return Tensor(((np.asarray(images, dtype=np.float64) / 255.0 - 0.5) / 0.25).astype(dtype))


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 8
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    augment: AugmentConfig = field(default_factory=AugmentConfig)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, norms: dict):
        self.iteration = iteration
        self.norms = norms
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
        report = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"non-finite loss at iteration {iteration}; largest parameter norms: {report}")


@dataclass
class TrainResult:
    model: GFFNet
    log: list


def batches(n: int, batch: int, rng: np.random.Generator):
    """Endless sequence of index batches over shuffled epochs."""
    buf: list[int] = []
    while True:
        while len(buf) < batch:
            buf.extend(rng.permutation(n).tolist())
        yield buf[:batch]
        buf = buf[batch:]


def losses(model: GFFNet, x: Tensor, y: np.ndarray):
    out = model(x)
    main = softmax_cross_entropy(out.logits, y, IGNORE_LABEL)
    aux = softmax_cross_entropy(out.aux_logits, y, IGNORE_LABEL)
    return main, aux, main + model.config.aux_weight * aux


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, samples: Sequence[SegmentationSample],
          seed: int, out_dir=None, model: GFFNet | None = None) -> TrainResult:
    """Run the full loop; deterministic for a given (seed, configs, samples)."""
    if not samples:
        raise ValueError("empty training set")
    model = model or build_model(model_cfg, stream(seed, "init"))
    model.train()
    named = list(model.named_parameters())
    state = OptimState(train_cfg.iterations, train_cfg.base_lr, train_cfg.momentum,
                       train_cfg.weight_decay, train_cfg.power)
    order = batches(len(samples), train_cfg.batch, stream(seed, "shuffle"))
    aug_rng = stream(seed, "augment")
    rows = []
    for it in range(train_cfg.iterations):
        idx = next(order)
        batch = [augment(samples[i], train_cfg.augment, aug_rng) for i in idx]
        x = to_input(np.stack([b.image for b in batch]))
        y = np.stack([b.labels for b in batch])
        lr = state.lr()
        try:
            main, aux, total = losses(model, x, y)
            if not np.isfinite(total.item()):
                raise FloatingPointError
            model.zero_grad()
            total.backward()
        except FloatingPointError:
            raise TrainingDiverged(it, {n: float(np.linalg.norm(p.data)) for n, p in named}) from None
        sgd_step(named, state, lr)
        rows.append((it, lr, main.item(), aux.item(), total.item()))
        if it % 100 == 0 or it == train_cfg.iterations - 1:
            log.info("iter %d lr %.3g loss %.4f", it, lr, total.item())
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(model, out / "checkpoint")
        write_log(rows, out / "metrics.csv")
    return TrainResult(model, rows)


def write_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for it, lr, lm, la, lt in rows:
            w.writerow([it, repr(lr), repr(lm), repr(la), repr(lt)])


# -- inference -------------------------------------------------------------------

def predict_proba(model: GFFNet, images: np.ndarray, gate_override=None) -> np.ndarray:
    model.eval()
    with no_grad():
        out = model(to_input(images, model.classifier.weight.dtype), gate_override)
    return softmax(out.logits.data, axis=1)


def _snap8(v: float) -> int:
    return max(8, int(round(v / 8.0)) * 8)


def infer_multiscale(model: GFFNet, images: np.ndarray, scales=MULTISCALE, gate_override=None) -> np.ndarray:
    """Average class-probability maps over rescaled copies of ``images``."""
    images = np.asarray(images, dtype=np.float32)
    h, w = images.shape[-2:]
    acc = None
    for s in scales:
        sh, sw = _snap8(h * s), _snap8(w * s)
        p = predict_proba(model, resize_image(images, sh, sw), gate_override)
        p = resize_image(p, h, w)
        acc = p if acc is None else acc + p
    return acc / len(scales)


def predict(model: GFFNet, samples: Sequence[SegmentationSample], batch: int = 16,
            scales=None, gate_override=None) -> list[np.ndarray]:
    preds = []
    for i in range(0, len(samples), batch):
        imgs = np.stack([s.image for s in samples[i:i + batch]])
        if scales is None:
            p = predict_proba(model, imgs, gate_override)
        else:
            p = infer_multiscale(model, imgs, scales, gate_override)
        preds.extend(argmax_predict(p))
    return preds


def evaluate(model: GFFNet, samples, batch: int = 16, scales=None, gate_override=None) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.classes)
    for s, p in zip(samples, predict(model, samples, batch, scales, gate_override)):
        cm.accumulate(p, s.labels, IGNORE_LABEL)
    return cm
