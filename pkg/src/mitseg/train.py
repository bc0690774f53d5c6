"""Desk-scale training and evaluation: AdamW with a poly LR schedule,
resize/flip/crop augmentation, cross-entropy with an ignore id, mIoU,
and sliding-window inference."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, ShapeError
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .model import SegformerModel
from .params import ParamStore
from .tensor import Tape, Tensor, bilinear_resize, cross_entropy

IGNORE_ID = 255


@dataclass
class SegSample:
    """One image/label pair: [3,H,W] floats in [0,1] and [H,W] class ids."""

    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"image must be [3,H,W], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise DataError(
                f"labels {self.labels.shape} do not match image {self.image.shape}")


@dataclass
class TrainSpec:
    """Hyperparameters of one training run."""

    total_iters: int
    base_lr: float = 6e-5
    poly_power: float = 1.0
    batch_size: int = 2
    crop: tuple[int, int] = (64, 64)
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    eval_every: int = 100
    target_miou: float | None = None

    def __post_init__(self):
        if self.total_iters < 1 or self.batch_size < 1 or self.base_lr <= 0:
            raise DataError("total_iters, batch_size and base_lr must be positive")
        if self.crop[0] % 32 or self.crop[1] % 32:
            raise DataError(f"crop {self.crop} must be divisible by 32")


def poly_lr(base: float, iteration: int, max_iter: int, power: float = 1.0) -> float:
    """base * (1 - iter/max_iter) ** power."""
    return base * (1.0 - iteration / max_iter) ** power


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ParamStore, grads: dict, state: AdamWState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01):
    """One decoupled-weight-decay Adam update with bias correction."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads.get(name)
        w = t.data
        if weight_decay:
            w -= lr * weight_decay * w   # decay acts on weights, not gradients
        if g is None:
            continue
        g = g.astype(np.float32, copy=False)
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# augmentation

def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return bilinear_resize(Tensor(image[None]), out_h, out_w).data[0]


def _resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    # nearest neighbor with half-pixel centers; interpolated ids are garbage
    h, w = labels.shape
    ys = np.clip(((np.arange(out_h) + 0.5) * h / out_h - 0.5).round(), 0, h - 1).astype(int)
    xs = np.clip(((np.arange(out_w) + 0.5) * w / out_w - 0.5).round(), 0, w - 1).astype(int)
    return labels[np.ix_(ys, xs)]


def augment(sample: SegSample, rng: np.random.Generator,
            crop: tuple[int, int] = (64, 64),
            scale_range: tuple[float, float] = (0.5, 2.0),
            hflip: bool = True) -> SegSample:
    """Random resize, horizontal flip, and crop (padding with 0 / ignore)."""
    image, labels = sample.image, sample.labels
    s = rng.uniform(*scale_range)
    if s != 1.0:
        out_h = max(1, int(round(image.shape[1] * s)))
        out_w = max(1, int(round(image.shape[2] * s)))
        image = _resize_image(image, out_h, out_w)
        labels = _resize_labels(labels, out_h, out_w)
    if hflip and rng.random() < 0.5:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    ch, cw = crop
    h, w = labels.shape
    if h < ch or w < cw:
        pad_h, pad_w = max(0, ch - h), max(0, cw - w)
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        labels = np.pad(labels, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_ID)
        h, w = labels.shape
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return SegSample(image=np.ascontiguousarray(image[:, y0:y0 + ch, x0:x0 + cw]),
                     labels=np.ascontiguousarray(labels[y0:y0 + ch, x0:x0 + cw]))


# ---------------------------------------------------------------------------
# loss and metric

def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Upsample quarter-resolution logits to label size, then masked CE."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be [B,H,W], got {labels.shape}")
    h, w = labels.shape[1:]
    if logits.shape[2:] != (h, w):
        logits = bilinear_resize(logits, h, w)
    return cross_entropy(logits, labels, ignore_index=IGNORE_ID)


class ConfusionMatrix:
    """Class-by-class pixel counts; ignore-id pixels never enter."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction: np.ndarray, labels: np.ndarray):
        if prediction.shape != labels.shape:
            raise ShapeError(f"prediction {prediction.shape} vs labels {labels.shape}")
        valid = labels != IGNORE_ID
        t = labels[valid].astype(np.int64)
        p = prediction[valid].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.num_classes):
            raise DataError(f"label ids outside [0, {self.num_classes})")
        np.add.at(self.counts, (t, p), 1)

    def miou(self) -> tuple[np.ndarray, float]:
        """Per-class IoU (nan where a class never occurs) and their mean."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        iou = np.full(self.num_classes, np.nan)
        present = denom > 0
        iou[present] = tp[present] / denom[present]
        mean = float(iou[present].mean()) if present.any() else 0.0
        return iou, mean


# ---------------------------------------------------------------------------
# inference

def _pad_to_32(image: np.ndarray) -> tuple[np.ndarray, int, int]:
    h, w = image.shape[1:]
    ph = (32 - h % 32) % 32
    pw = (32 - w % 32) % 32
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    return image, h, w


def _window_starts(total: int, win: int, stride: int) -> list[int]:
    if win >= total:
        return [0]
    starts = list(range(0, total - win + 1, stride))
    if starts[-1] != total - win:
        starts.append(total - win)   # shift the last window inward
    return starts


def sliding_window_infer(model: SegformerModel, image: np.ndarray,
                         window: tuple[int, int],
                         stride: tuple[int, int]) -> np.ndarray:
    """Full-resolution logits [N_cls, H, W], averaging overlapping windows."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be [3,H,W], got {image.shape}")
    if window[0] % 32 or window[1] % 32:
        raise ShapeError(f"window {window} must be divisible by 32")
    padded, orig_h, orig_w = _pad_to_32(image)
    h, w = padded.shape[1:]
    wh, ww = min(window[0], h), min(window[1], w)
    n_cls = model.config.num_classes
    canvas = np.zeros((n_cls, h, w), dtype=np.float64)
    coverage = np.zeros((h, w), dtype=np.int64)
    for y0 in _window_starts(h, wh, stride[0]):
        for x0 in _window_starts(w, ww, stride[1]):
            tile = padded[:, y0:y0 + wh, x0:x0 + ww]
            logits = model.forward(Tensor(tile[None]))
            logits = bilinear_resize(logits, wh, ww)
            canvas[:, y0:y0 + wh, x0:x0 + ww] += logits.data[0]
            coverage[y0:y0 + wh, x0:x0 + ww] += 1
    assert coverage.min() >= 1
    canvas /= coverage
    return canvas[:, :orig_h, :orig_w].astype(np.float32)


def predict(model: SegformerModel, image: np.ndarray) -> np.ndarray:
    """Single-window argmax prediction at image resolution."""
    h, w = image.shape[1:]
    logits = sliding_window_infer(model, image, (max(h, 32), max(w, 32)), (h, w))
    return logits.argmax(axis=0).astype(np.uint8)


def evaluate(model: SegformerModel, dataset: list[SegSample]) -> float:
    cm = ConfusionMatrix(model.config.num_classes)
    for sample in dataset:
        cm.update(predict(model, sample.image), sample.labels)
    return cm.miou()[1]


# ---------------------------------------------------------------------------
# training loop

@dataclass
class LogRow:
    iteration: int
    lr: float
    loss: float
    miou: float | None = None


def train_toy(model: SegformerModel, dataset: list[SegSample],
              spec: TrainSpec) -> list[LogRow]:
    """Train in place, returning the full scalar log (deterministic per seed)."""
    if not dataset:
        raise DataError("empty dataset")
    rng = np.random.default_rng(spec.seed)
    state = AdamWState()
    log: list[LogRow] = []
    for it in range(spec.total_iters):
        lr = poly_lr(spec.base_lr, it, spec.total_iters, spec.poly_power)
        picks = rng.integers(0, len(dataset), size=spec.batch_size)
        batch = [dataset[int(i)] for i in picks]
        if spec.augment:
            batch = [augment(s, rng, crop=spec.crop) for s in batch]
        x = np.stack([s.image for s in batch])
        y = np.stack([s.labels for s in batch])
        model.params.zero_grad()
        with Tape() as tape:
            loss = ce_loss(model.forward(Tensor(x)), y)
            tape.backward(loss)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(f"loss diverged at iteration {it}: {loss_val}")
        grads = {name: t.grad for name, t in model.params.items() if t.grad is not None}
        adamw_step(model.params, grads, state, lr, betas=spec.betas,
                   eps=spec.eps, weight_decay=spec.weight_decay)
        row = LogRow(iteration=it, lr=lr, loss=loss_val)
        last = it == spec.total_iters - 1
        if spec.eval_every and (it % spec.eval_every == spec.eval_every - 1 or last):
            row.miou = evaluate(model, dataset)
        log.append(row)
        if row.miou is not None and spec.target_miou is not None \
                and row.miou >= spec.target_miou:
            break
    return log


def write_log_csv(log: list[LogRow], path: str):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "lr", "loss", "miou"])
        for row in log:
            writer.writerow([row.iteration, f"{row.lr:.8g}", f"{row.loss:.8g}",
                             "" if row.miou is None else f"{row.miou:.6f}"])


# ---------------------------------------------------------------------------
# synthetic data and its disk format

def make_toy_dataset(n_images: int, size: int, n_classes: int,
                     seed: int = 0) -> list[SegSample]:
    """Colored rectangles and disks on a dark background; color = class."""
    if n_classes < 2:
        raise DataError("need at least 2 classes (background + 1)")
    rng = np.random.default_rng(seed)
    # fixed palette: background is dark gray, classes get saturated colors
    palette = np.zeros((n_classes, 3), dtype=np.float32)
    palette[0] = 0.15
    hues = np.linspace(0.0, 1.0, n_classes - 1, endpoint=False)
    for k, hue in enumerate(hues, start=1):
        angle = 2.0 * np.pi * hue
        palette[k] = 0.55 + 0.4 * np.array([np.cos(angle),
                                            np.cos(angle - 2.0 * np.pi / 3.0),
                                            np.cos(angle + 2.0 * np.pi / 3.0)])
    palette = np.clip(palette, 0.0, 1.0)

    samples = []
    for _ in range(n_images):
        labels = np.zeros((size, size), dtype=np.uint8)
        yy, xx = np.mgrid[0:size, 0:size]
        for cls in range(1, n_classes):
            for _ in range(rng.integers(1, 3)):
                cy, cx = rng.integers(0, size, 2)
                r = int(rng.integers(size // 8, size // 3))
                if rng.random() < 0.5:
                    mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
                else:
                    mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
                labels[mask] = cls
        image = palette[labels].transpose(2, 0, 1).copy()
        image += rng.normal(0.0, 0.02, image.shape).astype(np.float32)
        samples.append(SegSample(image=np.clip(image, 0.0, 1.0),
                                 labels=labels))
    return samples


def save_dataset(directory: str, samples: list[SegSample]):
    import os
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        write_ppm(os.path.join(directory, f"{i:04d}.ppm"), s.image)
        write_pgm(os.path.join(directory, f"{i:04d}.pgm"), s.labels.astype(np.uint8))


def load_dataset(directory: str) -> list[SegSample]:
    import os
    if not os.path.isdir(directory):
        raise DataError(f"{directory}: not a directory")
    ids = sorted(f[:-4] for f in os.listdir(directory) if f.endswith(".ppm"))
    if not ids:
        raise DataError(f"{directory}: no .ppm images found")
    samples = []
    for name in ids:
        ppm = os.path.join(directory, name + ".ppm")
        pgm = os.path.join(directory, name + ".pgm")
        if not os.path.exists(pgm):
            raise DataError(f"{pgm}: missing label map for {ppm}")
        samples.append(SegSample(image=read_ppm(ppm), labels=read_pgm(pgm)))
    return samples
