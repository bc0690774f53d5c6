"""Whole-model assembly, parameter/MAC accounting, checkpoint I/O."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .configs import MitConfig, config_from_text, config_to_text, resolution_plan
from .decoder import decode, decoder_param_count, init_decoder_params
from .encoder import (FeaturePyramid, encoder_forward, init_encoder_params,
                      init_positional_embedding)
from .errors import CheckpointError, CheckpointMismatch
from .params import ParamStore
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MITS"
CHECKPOINT_VERSION = 1


class SegformerModel:
    """Encoder plus decoder bound to one config and one parameter store."""

    def __init__(self, config: MitConfig, params: ParamStore):
        self.config = config
        self.params = params

    def forward(self, x: Tensor) -> Tensor:
        """Class logits on the 1/4 grid: [B, N_cls, H/4, W/4]."""
        return decode(self.config, self.params, self.encode(x))

    def encode(self, x: Tensor) -> FeaturePyramid:
        return encoder_forward(self.config, self.params, x)

    def decode(self, pyr: FeaturePyramid, return_fused: bool = False):
        return decode(self.config, self.params, pyr, return_fused=return_fused)


def build(config: MitConfig, seed: int = 0) -> SegformerModel:
    """Deterministically initialize a model; same seed, same bits."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_encoder_params(store, rng, config.stages)
    if config.positional_mode == "learned_pe":
        init_positional_embedding(store, rng, config)
    init_decoder_params(store, rng, config)
    return SegformerModel(config, store)


# ---------------------------------------------------------------------------
# cost accounting

@dataclass
class CostReport:
    """Learnable-parameter and multiply-accumulate totals.

    MACs count convs, linears and the two attention matmuls; norms, GELU,
    softmax and bilinear resampling are excluded. One MAC is one "FLOP"
    in the convention of the published tables.
    """

    variant: str
    num_classes: int
    encoder_params: int
    decoder_params: int
    total_params: int
    input_size: tuple[int, int] | None = None
    macs: int | None = None
    stage_params: tuple[int, ...] = ()
    stage_macs: tuple[int, ...] = ()
    decoder_macs: int | None = None
    # per stage: {"conv", "attn_qk", "attn_linear", "ffn_linear"}; convs cover
    # the patch embedding and the Mix-FFN depthwise pass
    stage_mac_terms: tuple[dict, ...] = ()

    def render(self) -> str:
        lines = [
            f"variant: {self.variant}",
            f"num_classes: {self.num_classes}",
            f"encoder_params: {self.encoder_params}",
            f"decoder_params: {self.decoder_params}",
            f"total_params: {self.total_params}",
        ]
        for i, p in enumerate(self.stage_params, start=1):
            lines.append(f"stage{i}_params: {p}")
        if self.input_size is not None:
            lines.append(f"input_size: {self.input_size[0]}x{self.input_size[1]}")
            for i, m in enumerate(self.stage_macs, start=1):
                lines.append(f"stage{i}_macs: {m}")
            lines.append(f"decoder_macs: {self.decoder_macs}")
            lines.append(f"macs: {self.macs}")
        return "\n".join(lines) + "\n"


def _stage_param_count(config: MitConfig, idx: int, in_ch: int) -> int:
    st = config.stages[idx]
    c = st.channels
    n = c * in_ch * st.patch_kernel ** 2 + c + 2 * c          # patch conv + ln
    per_block = 2 * c + 2 * c                                  # ln1, ln2
    per_block += 4 * (c * c + c)                               # q, k, v, o
    if st.reduction > 1:
        per_block += (c * st.reduction ** 2) * c + c + 2 * c   # wr + ln_r
    ec = st.ffn_expand * c
    per_block += c * ec + ec + ec * 10 + ec * c + c            # fc1, 3x3 dw, fc2
    n += st.depth * per_block
    n += 2 * c                                                 # stage-final ln
    return n


def count_params(model: SegformerModel) -> CostReport:
    config = model.config
    stage_params = []
    in_ch = 3
    for i in range(4):
        stage_params.append(_stage_param_count(config, i, in_ch))
        in_ch = config.stages[i].channels
    enc = sum(stage_params)
    if config.positional_mode == "learned_pe":
        enc += config.pe_grid[0] * config.pe_grid[1] * config.stages[0].channels
    dec = decoder_param_count(config)
    total = enc + dec
    stored = model.params.total_params()
    assert stored == total, f"closed-form count {total} != stored {stored}"
    return CostReport(variant=config.variant, num_classes=config.num_classes,
                      encoder_params=enc, decoder_params=dec, total_params=total,
                      stage_params=tuple(stage_params))


def count_macs(model: SegformerModel, input_h: int, input_w: int) -> CostReport:
    """Analytic multiply-accumulate count for one forward at the given size."""
    config = model.config
    plan = resolution_plan(config, input_h, input_w)
    report = count_params(model)
    stage_macs = []
    stage_terms = []
    in_ch = 3
    for st, (h, w) in zip(config.stages, plan.grids):
        c, n = st.channels, h * w
        red = n // st.reduction ** 2
        ec = st.ffn_expand * c
        conv = n * c * in_ch * st.patch_kernel ** 2                # patch conv
        conv += st.depth * n * ec * 9                              # ffn depthwise
        attn_linear = 2 * n * c * c                                # q, output proj
        if st.reduction > 1:
            attn_linear += red * (c * st.reduction ** 2) * c       # kv reduction
        attn_linear += 2 * red * c * c                             # k, v
        attn_qk = 2 * n * red * c                                  # QK^T and attn V
        ffn_linear = n * c * ec + n * ec * c
        terms = {"conv": conv,
                 "attn_qk": st.depth * attn_qk,
                 "attn_linear": st.depth * attn_linear,
                 "ffn_linear": st.depth * ffn_linear}
        stage_terms.append(terms)
        stage_macs.append(sum(terms.values()))
        in_ch = c
    th, tw = plan.grids[0]
    t = th * tw
    cdec = config.decoder_width
    dec = sum(n * st.channels * cdec
              for st, (h, w) in zip(config.stages, plan.grids)
              for n in (h * w,))
    dec += t * 4 * cdec * cdec + t * cdec * config.num_classes
    report.input_size = (input_h, input_w)
    report.stage_macs = tuple(stage_macs)
    report.stage_mac_terms = tuple(stage_terms)
    report.decoder_macs = dec
    report.macs = sum(stage_macs) + dec
    return report


# ---------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(model: SegformerModel, path: str):
    """Write magic, version, config text, then every named float32 tensor."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg = config_to_text(model.config).encode("utf-8")
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.ndim))
            for d in t.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read(f: io.BufferedReader, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def load_checkpoint(path: str, expected_config: MitConfig | None = None) -> SegformerModel:
    """Rebuild a model from a checkpoint; optionally pin the expected config."""
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (clen,) = struct.unpack("<I", _read(f, 4, "config length"))
        config = config_from_text(_read(f, clen, "config").decode("utf-8"))
        if expected_config is not None and config != expected_config:
            raise CheckpointMismatch(
                f"{path}: checkpoint config ({config.variant}) does not match "
                f"the expected config ({expected_config.variant})")
        model = build(config, seed=0)
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        if count != len(model.params):
            raise CheckpointError(
                f"{path}: {count} tensors stored, config defines {len(model.params)}")
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(f, 4, "name length"))
            name = _read(f, nlen, "name").decode("utf-8")
            if name not in model.params:
                raise CheckpointError(f"{path}: unknown tensor name {name!r}")
            if name in seen:
                raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
            seen.add(name)
            (rank,) = struct.unpack("<B", _read(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank, "dims"))
            want = model.params[name].shape
            if tuple(dims) != want:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {dims}, expected {want}")
            size = int(np.prod(dims)) if rank else 1
            raw = _read(f, 4 * size, f"data of {name!r}")
            model.params.load_array(
                name, np.frombuffer(raw, dtype="<f4").reshape(dims))
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return model
