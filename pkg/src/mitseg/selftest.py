"""Built-in correctness checks behind `mitseg selftest`.

Each check returns quietly or raises NumericError with the failing detail;
run_selftest prints one line per check and reports the first failure.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .configs import builtin_config, micro_config, resolution_plan
from .encoder import efficient_attention_forward, init_stage_params
from .errors import NumericError
from .gradcheck import gradcheck
from .model import build, count_params, load_checkpoint, save_checkpoint
from .params import ParamStore
from .tensor import (Tensor, conv2d, gelu, layer_norm, linear, matmul,
                     softmax)
from .train import ce_loss


def _require(ok: bool, detail: str):
    if not ok:
        raise NumericError(detail)


def check_kernel_gradients():
    r = np.random.default_rng(0)
    cases = [
        ("linear", lambda x, w, b: linear(x, w, b),
         [r.standard_normal((4, 5)), r.standard_normal((5, 3)), r.standard_normal(3)]),
        ("softmax", softmax, [r.standard_normal((3, 7))]),
        ("layer_norm", lambda x, g, b: layer_norm(x, g, b),
         [r.standard_normal((3, 8)), r.standard_normal(8), r.standard_normal(8)]),
        ("gelu", gelu, [r.standard_normal(9)]),
        ("matmul", matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 2))]),
        ("conv2d", lambda x, w, b: conv2d(x, w, b, stride=1, pad=1, groups=2),
         [r.standard_normal((1, 4, 5, 5)), r.standard_normal((4, 2, 3, 3)),
          r.standard_normal(4)]),
    ]
    for name, fn, arrays in cases:
        err = gradcheck(fn, arrays, step=1e-3 if name == "gelu" else 1e-4)
        _require(err < 1e-5, f"{name} gradient error {err:.2e} >= 1e-5")


def check_conv_counting():
    ones = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    k = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    y = conv2d(ones, k, Tensor(np.zeros(1, dtype=np.float32)), stride=1, pad=1).data[0, 0]
    _require(y[1, 1] == 9.0 and y[0, 0] == 4.0, f"conv overlap counts wrong: {y}")


def check_attention_oracle():
    c, heads, n = 8, 2, 16
    r = np.random.default_rng(1)
    p = {}
    for nm in ("q", "k", "v", "o"):
        p[f"a.w{nm}"] = Tensor(r.standard_normal((c, c)) * 0.3)
        p[f"a.b{nm}"] = Tensor(r.standard_normal(c) * 0.1)
    x = r.standard_normal((1, n, c))
    got = efficient_attention_forward(p, "a", Tensor(x), (4, 4), heads, 1).data
    d = c // heads
    out = np.zeros_like(x)
    q = x @ p["a.wq"].data + p["a.bq"].data
    k = x @ p["a.wk"].data + p["a.bk"].data
    v = x @ p["a.wv"].data + p["a.bv"].data
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        s = q[0][:, sl] @ k[0][:, sl].T / np.sqrt(d)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[0][:, sl] = w @ v[0][:, sl]
    want = out @ p["a.wo"].data + p["a.bo"].data
    diff = np.abs(got - want).max()
    _require(diff < 1e-5, f"R=1 attention differs from O(N^2) reference by {diff:.2e}")


def check_shapes():
    model = build(micro_config(num_classes=3), seed=0)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 3, 64, 64)).astype(np.float32))
    logits = model.forward(x)
    _require(logits.shape == (1, 3, 16, 16), f"logit shape {logits.shape}")
    plan = resolution_plan(builtin_config("B0"), 512, 512)
    _require(plan.grids == ((128, 128), (64, 64), (32, 32), (16, 16)),
             f"B0@512 grids {plan.grids}")


def check_param_counts():
    published = {"B0": 3.4e6, "B2": 24.2e6}
    for variant, want in published.items():
        got = count_params(build(builtin_config(variant), seed=0)).encoder_params
        _require(abs(got - want) / want <= 0.03,
                 f"{variant} encoder {got} vs published {want:.0f}")


def check_checkpoint_round_trip():
    model = build(micro_config(num_classes=3), seed=4)
    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "m.ckpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        _require(loaded.params.checksum() == model.params.checksum(),
                 "checkpoint round trip changed parameter bytes")


def check_block_gradients():
    from .configs import StageConfig
    from .encoder import block_forward
    stage = StageConfig(patch_kernel=3, patch_stride=2, patch_pad=1, channels=8,
                        depth=1, reduction=2, heads=2, ffn_expand=2)
    store = ParamStore()
    init_stage_params(store, np.random.default_rng(5), 1, stage, 3)
    names = [n for n in store.names() if ".blk0." in n]
    x = np.random.default_rng(6).standard_normal((1, 16, 8)) * 0.5

    def fn(xt, *ts):
        d = {n: t for n, t in zip(names, ts)}
        return block_forward(d, "enc.s1.blk0", xt, (4, 4), stage)

    err = gradcheck(fn, [x] + [store[n].data.astype(np.float64) for n in names])
    _require(err < 1e-4, f"encoder block gradient error {err:.2e} >= 1e-4")


def check_loss_gradients():
    r = np.random.default_rng(7)
    labels = r.integers(0, 2, size=(1, 8, 8))
    logits = r.standard_normal((1, 2, 2, 2))
    err = gradcheck(lambda t: ce_loss(t, labels), [logits])
    _require(err < 1e-4, f"ce_loss gradient error {err:.2e} >= 1e-4")


QUICK_CHECKS = [
    ("kernel_gradients", check_kernel_gradients),
    ("conv_counting", check_conv_counting),
    ("attention_oracle", check_attention_oracle),
    ("shapes", check_shapes),
]
FULL_CHECKS = QUICK_CHECKS + [
    ("param_counts", check_param_counts),
    ("checkpoint_round_trip", check_checkpoint_round_trip),
    ("block_gradients", check_block_gradients),
    ("loss_gradients", check_loss_gradients),
]


def run_selftest(level: str = "quick", emit=print) -> bool:
    checks = QUICK_CHECKS if level == "quick" else FULL_CHECKS
    passed = True
    for name, fn in checks:
        try:
            fn()
            emit(f"{name}: ok")
        except NumericError as e:
            emit(f"{name}: FAIL ({e})")
            passed = False
    return passed
