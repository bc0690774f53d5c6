"""Effective receptive field: input-gradient energy of a central unit.

For one stage (or the decoder's fused feature), seed a unit gradient on
every channel of the spatially central feature vector, backpropagate to
the input, and average the per-pixel absolute gradient over images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .imageio import write_pgm
from .model import SegformerModel
from .tensor import Tape, Tensor

STAGE_CHOICES = (1, 2, 3, 4, "decoder")


@dataclass
class ErfMap:
    """Max-normalized input-gradient magnitude map for one model stage."""

    values: np.ndarray          # [H, W], in [0, 1]
    stage: str
    n_images: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"ERF map must be 2-D, got {self.values.shape}")


def compute_erf(model: SegformerModel, stage, images, batch_size: int = 1) -> ErfMap:
    """Average the central unit's input gradient over `images`.

    `stage` is 1..4 for pyramid levels or "decoder" for the fused
    pre-classifier feature. Images are [3, H, W] arrays at one shared
    resolution.
    """
    if stage not in STAGE_CHOICES:
        raise ShapeError(f"stage must be one of {STAGE_CHOICES}, got {stage!r}")
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if not images:
        raise ShapeError("compute_erf needs at least one image")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise ShapeError("all ERF images must share one resolution")

    total = np.zeros(shape[1:], dtype=np.float64)
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        x = Tensor(np.stack(chunk), requires_grad=True)
        with Tape() as tape:
            pyr = model.encode(x)
            if stage == "decoder":
                _, feat = model.decode(pyr, return_fused=True)
            else:
                feat = pyr.levels[stage - 1]
            b, c, h, w = feat.shape
            seed = np.zeros(feat.shape, dtype=feat.dtype)
            seed[:, :, h // 2, w // 2] = 1.0
            tape.backward(feat, seed)
        total += np.abs(x.grad).sum(axis=1).sum(axis=0)

    mean = total / len(images)
    peak = mean.max()
    if peak > 0:
        mean = mean / peak
    return ErfMap(values=mean, stage=str(stage), n_images=len(images))


def erf_radius(erf: ErfMap, mass: float) -> float:
    """Smallest centered disk radius holding at least `mass` of the map."""
    if not 0.0 < mass <= 1.0:
        raise ShapeError(f"mass must be in (0, 1], got {mass}")
    h, w = erf.values.shape
    cy, cx = h // 2, w // 2
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - cy, xx - cx).reshape(-1)
    weights = erf.values.reshape(-1)
    total = weights.sum()
    if total <= 0:
        return 0.0
    order = np.argsort(dist, kind="stable")
    cum = np.cumsum(weights[order])
    idx = int(np.searchsorted(cum, mass * total - 1e-12))
    idx = min(idx, len(dist) - 1)
    return float(dist[order][idx])


def save_erf(erf: ErfMap, pgm_path: str):
    """Export as 8-bit P5 plus a text sidecar with r50/r90 radii."""
    u8 = np.clip(np.round(erf.values * 255.0), 0, 255).astype(np.uint8)
    write_pgm(pgm_path, u8)
    r50 = erf_radius(erf, 0.5)
    r90 = erf_radius(erf, 0.9)
    with open(pgm_path + ".txt", "w") as f:
        f.write(f"stage: {erf.stage}\n")
        f.write(f"n_images: {erf.n_images}\n")
        f.write(f"r50: {r50:.3f}\n")
        f.write(f"r90: {r90:.3f}\n")
    return r50, r90
