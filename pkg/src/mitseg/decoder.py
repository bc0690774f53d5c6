"""All-MLP decoder: unify channels per level, upsample to the 1/4 grid,
concatenate, fuse, classify. Every layer is a per-pixel linear map."""

from __future__ import annotations

import numpy as np

from .configs import MitConfig
from .errors import ShapeError
from .params import ParamStore, trunc_normal
from .encoder import FeaturePyramid, to_grid, to_sequence
from .tensor import bilinear_resize, concat, linear


def init_decoder_params(store: ParamStore, rng: np.random.Generator,
                        config: MitConfig):
    c = config.decoder_width
    for i, stage in enumerate(config.stages, start=1):
        store.add(f"dec.unify{i}.w", trunc_normal(rng, (stage.channels, c)))
        store.add(f"dec.unify{i}.b", np.zeros(c, dtype=np.float32))
    store.add("dec.fuse.w", trunc_normal(rng, (4 * c, c)))
    store.add("dec.fuse.b", np.zeros(c, dtype=np.float32))
    store.add("dec.cls.w", trunc_normal(rng, (c, config.num_classes)))
    store.add("dec.cls.b", np.zeros(config.num_classes, dtype=np.float32))


def decode(config: MitConfig, store: ParamStore, pyr: FeaturePyramid,
           return_fused: bool = False):
    """Fuse the pyramid into class logits on the F1 grid [B, N_cls, H/4, W/4].

    With return_fused=True also returns the fused pre-classifier feature
    map (used by receptive-field analysis).
    """
    if len(pyr.levels) != 4:
        raise ShapeError(f"decoder needs 4 pyramid levels, got {len(pyr.levels)}")
    target = pyr.grids[0]
    ups = []
    for i, (lvl, grid, stage) in enumerate(zip(pyr.levels, pyr.grids, config.stages),
                                           start=1):
        b, c, h, w = lvl.shape
        if c != stage.channels or (h, w) != grid:
            raise ShapeError(
                f"level {i}: got [{b},{c},{h},{w}], config expects "
                f"{stage.channels} channels on grid {grid}")
        seq = to_sequence(lvl)
        seq = linear(seq, store[f"dec.unify{i}.w"], store[f"dec.unify{i}.b"])
        grid_map = to_grid(seq, grid)
        if grid != target:
            grid_map = bilinear_resize(grid_map, target[0], target[1])
        ups.append(grid_map)
    fused_map = concat(ups, axis=1)
    fused_seq = to_sequence(fused_map)
    fused_seq = linear(fused_seq, store["dec.fuse.w"], store["dec.fuse.b"])
    logits_seq = linear(fused_seq, store["dec.cls.w"], store["dec.cls.b"])
    logits = to_grid(logits_seq, target)
    if return_fused:
        return logits, to_grid(fused_seq, target)
    return logits


def decoder_param_count(config: MitConfig) -> int:
    """Exact learnable scalar count of the decoder head."""
    c = config.decoder_width
    n = sum(stage.channels * c + c for stage in config.stages)   # unify
    n += 4 * c * c + c                                           # fuse
    n += c * config.num_classes + config.num_classes             # classify
    return n
