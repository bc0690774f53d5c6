"""Hierarchical Mix Transformer encoder.

Each of the four stages embeds with an overlapping strided conv, runs a
stack of pre-norm blocks (efficient self-attention + Mix-FFN, both with
residuals), and closes with a layer norm. Positional information comes
from the zero-padded 3x3 depthwise conv inside Mix-FFN, so the default
model carries no positional state and runs at any 32-divisible size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .configs import MitConfig, StageConfig
from .errors import ShapeError
from .params import ParamStore, conv_fan_out_normal, trunc_normal
from .tensor import (Tensor, add, bilinear_resize, conv2d, gelu, layer_norm,
                     linear, matmul, reshape, scale, softmax, transpose)


@dataclass
class FeaturePyramid:
    """Encoder outputs F1..F4 at 1/4, 1/8, 1/16, 1/32 of input resolution."""

    levels: tuple[Tensor, ...]
    grids: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.levels) != 4 or len(self.grids) != 4:
            raise ShapeError(f"feature pyramid needs 4 levels, got {len(self.levels)}")
        for lvl, (h, w) in zip(self.levels, self.grids):
            if lvl.shape[2:] != (h, w):
                raise ShapeError(f"level shape {lvl.shape} disagrees with grid {(h, w)}")
        for a, b in zip(self.grids, self.grids[1:]):
            if b != (a[0] // 2, a[1] // 2):
                raise ShapeError(f"grids must halve level to level, got {self.grids}")
        chans = [lvl.shape[1] for lvl in self.levels]
        if any(c2 <= c1 for c1, c2 in zip(chans, chans[1:])):
            raise ShapeError(f"channels must strictly increase, got {chans}")


# ---------------------------------------------------------------------------
# parameter initialization

def init_stage_params(store: ParamStore, rng: np.random.Generator, idx: int,
                      stage: StageConfig, in_ch: int):
    """Create all parameters of encoder stage `idx` (1-based)."""
    p = f"enc.s{idx}"
    c = stage.channels
    store.add(f"{p}.patch.w",
              conv_fan_out_normal(rng, (c, in_ch, stage.patch_kernel, stage.patch_kernel)))
    store.add(f"{p}.patch.b", np.zeros(c, dtype=np.float32))
    store.add(f"{p}.patch.ln.g", np.ones(c, dtype=np.float32))
    store.add(f"{p}.patch.ln.b", np.zeros(c, dtype=np.float32))
    for j in range(stage.depth):
        b = f"{p}.blk{j}"
        store.add(f"{b}.ln1.g", np.ones(c, dtype=np.float32))
        store.add(f"{b}.ln1.b", np.zeros(c, dtype=np.float32))
        for nm in ("q", "k", "v", "o"):
            store.add(f"{b}.attn.w{nm}", trunc_normal(rng, (c, c)))
            store.add(f"{b}.attn.b{nm}", np.zeros(c, dtype=np.float32))
        if stage.reduction > 1:
            r2 = stage.reduction ** 2
            store.add(f"{b}.attn.wr", trunc_normal(rng, (c * r2, c)))
            store.add(f"{b}.attn.br", np.zeros(c, dtype=np.float32))
            store.add(f"{b}.attn.ln_r.g", np.ones(c, dtype=np.float32))
            store.add(f"{b}.attn.ln_r.b", np.zeros(c, dtype=np.float32))
        store.add(f"{b}.ln2.g", np.ones(c, dtype=np.float32))
        store.add(f"{b}.ln2.b", np.zeros(c, dtype=np.float32))
        ec = stage.ffn_expand * c
        store.add(f"{b}.ffn.fc1.w", trunc_normal(rng, (c, ec)))
        store.add(f"{b}.ffn.fc1.b", np.zeros(ec, dtype=np.float32))
        store.add(f"{b}.ffn.dw.w", conv_fan_out_normal(rng, (ec, 1, 3, 3), groups=ec))
        store.add(f"{b}.ffn.dw.b", np.zeros(ec, dtype=np.float32))
        store.add(f"{b}.ffn.fc2.w", trunc_normal(rng, (ec, c)))
        store.add(f"{b}.ffn.fc2.b", np.zeros(c, dtype=np.float32))
    store.add(f"{p}.ln.g", np.ones(c, dtype=np.float32))
    store.add(f"{p}.ln.b", np.zeros(c, dtype=np.float32))


def init_encoder_params(store: ParamStore, rng: np.random.Generator,
                        stages: tuple[StageConfig, ...], in_ch: int = 3):
    prev = in_ch
    for i, stage in enumerate(stages, start=1):
        init_stage_params(store, rng, i, stage, prev)
        prev = stage.channels


def init_positional_embedding(store: ParamStore, rng: np.random.Generator,
                              config: MitConfig):
    """Learned per-position table for the PE-ablation mode, stage-1 grid."""
    h, w = config.pe_grid
    c = config.stages[0].channels
    store.add("enc.pe", trunc_normal(rng, (1, h * w, c)))


# ---------------------------------------------------------------------------
# forward

def to_sequence(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def to_grid(x: Tensor, grid: tuple[int, int]) -> Tensor:
    b, n, c = x.shape
    h, w = grid
    return transpose(reshape(x, (b, h, w, c)), (0, 3, 1, 2))


def patch_embed_forward(store: ParamStore, prefix: str, x: Tensor,
                        stage: StageConfig) -> tuple[Tensor, tuple[int, int]]:
    """Overlapping patch merge: strided conv, flatten to sequence, layer norm."""
    y = conv2d(x, store[f"{prefix}.patch.w"], store[f"{prefix}.patch.b"],
               stride=stage.patch_stride, pad=stage.patch_pad)
    _, _, h, w = y.shape
    seq = layer_norm(to_sequence(y), store[f"{prefix}.patch.ln.g"],
                     store[f"{prefix}.patch.ln.b"])
    return seq, (h, w)


def reduce_tokens(x: Tensor, grid: tuple[int, int], reduction: int) -> Tensor:
    """Fold each RxR spatial tile into one token of dimension C*R^2."""
    b, n, c = x.shape
    h, w = grid
    if n != h * w:
        raise ShapeError(f"sequence length {n} != grid {h}x{w}")
    if h % reduction or w % reduction:
        raise ShapeError(f"reduction {reduction} does not divide grid {h}x{w}")
    hr, wr = h // reduction, w // reduction
    g = reshape(x, (b, hr, reduction, wr, reduction, c))
    g = transpose(g, (0, 1, 3, 2, 4, 5))
    return reshape(g, (b, hr * wr, reduction * reduction * c))


def efficient_attention_forward(store: ParamStore, prefix: str, x: Tensor,
                                grid: tuple[int, int], heads: int,
                                reduction: int) -> Tensor:
    """Multi-head attention over a key/value sequence shortened by R^2.

    The query keeps full length N; keys and values come from one shared
    reduced sequence (tile fold -> linear -> layer norm). At R=1 the
    reduction path is the identity: keys and values read the input
    directly and no reduction parameters exist.
    """
    b, n, c = x.shape
    h, w = grid
    if n != h * w:
        raise ShapeError(f"attention: sequence length {n} != grid {h}x{w}")
    if c % heads:
        raise ShapeError(f"attention: channels {c} not divisible by {heads} heads")
    d = c // heads

    q = linear(x, store[f"{prefix}.wq"], store[f"{prefix}.bq"])
    if reduction > 1:
        src = reduce_tokens(x, grid, reduction)
        src = linear(src, store[f"{prefix}.wr"], store[f"{prefix}.br"])
        src = layer_norm(src, store[f"{prefix}.ln_r.g"], store[f"{prefix}.ln_r.b"])
    else:
        src = x
    m = src.shape[1]
    assert m == n // (reduction * reduction)
    k = linear(src, store[f"{prefix}.wk"], store[f"{prefix}.bk"])
    v = linear(src, store[f"{prefix}.wv"], store[f"{prefix}.bv"])

    qh = transpose(reshape(q, (b, n, heads, d)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (b, m, heads, d)), (0, 2, 1, 3))
    vh = transpose(reshape(v, (b, m, heads, d)), (0, 2, 1, 3))
    att = softmax(scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / d ** 0.5))
    out = matmul(att, vh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, c))
    return linear(out, store[f"{prefix}.wo"], store[f"{prefix}.bo"])


def mix_ffn_forward(store: ParamStore, prefix: str, x: Tensor,
                    grid: tuple[int, int], expand: int) -> Tensor:
    """expand -> 3x3 depthwise conv on the grid -> GELU -> project."""
    b, n, c = x.shape
    h, w = grid
    if n != h * w:
        raise ShapeError(f"mix_ffn: sequence length {n} != grid {h}x{w}")
    ec = expand * c
    y = linear(x, store[f"{prefix}.fc1.w"], store[f"{prefix}.fc1.b"])
    g = to_grid(y, grid)
    g = conv2d(g, store[f"{prefix}.dw.w"], store[f"{prefix}.dw.b"],
               stride=1, pad=1, groups=ec)
    y = to_sequence(g)
    y = gelu(y)
    return linear(y, store[f"{prefix}.fc2.w"], store[f"{prefix}.fc2.b"])


def block_forward(store: ParamStore, prefix: str, x: Tensor,
                  grid: tuple[int, int], stage: StageConfig) -> Tensor:
    a = layer_norm(x, store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"])
    a = efficient_attention_forward(store, f"{prefix}.attn", a, grid,
                                    stage.heads, stage.reduction)
    x = add(x, a)
    f = layer_norm(x, store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"])
    f = mix_ffn_forward(store, f"{prefix}.ffn", f, grid, stage.ffn_expand)
    return add(x, f)


def _positional_embedding(store: ParamStore, config: MitConfig,
                          grid: tuple[int, int]) -> Tensor:
    pe = store["enc.pe"]
    ph, pw = config.pe_grid
    if grid == (ph, pw):
        return pe
    # Test grid differs from the training grid: interpolate the table.
    c = config.stages[0].channels
    as_map = transpose(reshape(pe, (1, ph, pw, c)), (0, 3, 1, 2))
    resized = bilinear_resize(as_map, grid[0], grid[1])
    return reshape(transpose(resized, (0, 2, 3, 1)), (1, grid[0] * grid[1], c))


def encoder_forward(config: MitConfig, store: ParamStore, x: Tensor) -> FeaturePyramid:
    """Run all four stages, returning NCHW feature maps F1..F4."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"encoder input must be [B,3,H,W], got {x.shape}")
    levels = []
    grids = []
    cur = x
    for i, stage in enumerate(config.stages, start=1):
        prefix = f"enc.s{i}"
        try:
            seq, grid = patch_embed_forward(store, prefix, cur, stage)
            if i == 1 and config.positional_mode == "learned_pe":
                seq = add(seq, _positional_embedding(store, config, grid))
            for j in range(stage.depth):
                seq = block_forward(store, f"{prefix}.blk{j}", seq, grid, stage)
            seq = layer_norm(seq, store[f"{prefix}.ln.g"], store[f"{prefix}.ln.b"])
        except ShapeError as e:
            raise ShapeError(f"stage {i}: {e}") from e
        cur = to_grid(seq, grid)
        levels.append(cur)
        grids.append(grid)
    return FeaturePyramid(levels=tuple(levels), grids=tuple(grids))
