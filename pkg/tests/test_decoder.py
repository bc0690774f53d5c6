"""Decoder checks: shapes, published head sizes, locality, gradients."""

import numpy as np
import pytest

from mitseg.configs import builtin_config, micro_config
from mitseg.decoder import decode, decoder_param_count, init_decoder_params
from mitseg.encoder import FeaturePyramid
from mitseg.errors import ShapeError
from mitseg.gradcheck import gradcheck
from mitseg.params import ParamStore
from mitseg.tensor import Tensor


def make_pyramid(cfg, size, batch=1, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    levels, grids = [], []
    for i, stage in enumerate(cfg.stages, start=1):
        g = size // 2 ** (i + 1)
        levels.append(Tensor(rng.standard_normal(
            (batch, stage.channels, g, g)).astype(dtype)))
        grids.append((g, g))
    return FeaturePyramid(levels=tuple(levels), grids=tuple(grids))


def make_store(cfg, seed=0):
    store = ParamStore()
    init_decoder_params(store, np.random.default_rng(seed), cfg)
    return store


def test_logit_shape_follows_f1_grid():
    cfg = builtin_config("B0", num_classes=4)
    store = make_store(cfg)
    logits = decode(cfg, store, make_pyramid(cfg, 64))
    assert logits.shape == (1, 4, 16, 16)


@pytest.mark.parametrize("variant,size", [("B0", 64), ("B1", 128), ("B2", 64)])
def test_output_grid_is_quarter_resolution_for_all_variants(variant, size):
    cfg = builtin_config(variant, num_classes=7)
    logits = decode(cfg, make_store(cfg), make_pyramid(cfg, size))
    assert logits.shape == (1, 7, size // 4, size // 4)


def test_zero_classifier_weights_emit_bias_everywhere():
    cfg = builtin_config("B0", num_classes=3)
    store = make_store(cfg)
    store["dec.cls.w"].data = np.zeros_like(store["dec.cls.w"].data)
    store["dec.cls.b"].data = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    logits = decode(cfg, store, make_pyramid(cfg, 64)).data
    for k, v in enumerate((1.0, 2.0, 3.0)):
        np.testing.assert_allclose(logits[:, k], v, atol=1e-6)


def test_f1_only_path_is_pixelwise_local():
    # zero the unify weights of levels 2-4: decode reduces to a per-pixel
    # MLP of F1, so one F1 pixel can only move its own output pixel
    cfg = builtin_config("B0", num_classes=3)
    store = make_store(cfg, seed=1)
    for i in (2, 3, 4):
        store[f"dec.unify{i}.w"].data = np.zeros_like(store[f"dec.unify{i}.w"].data)
    pyr = make_pyramid(cfg, 64, seed=2)
    base = decode(cfg, store, pyr).data.copy()
    pyr.levels[0].data[0, :, 5, 9] += 1.0
    moved = decode(cfg, store, pyr).data
    diff = np.abs(moved - base).sum(axis=1)[0]
    assert diff[5, 9] > 1e-4
    diff[5, 9] = 0.0
    assert diff.max() < 1e-6


def test_mismatched_level_shapes_rejected():
    cfg = builtin_config("B0", num_classes=3)
    store = make_store(cfg)
    pyr = make_pyramid(cfg, 64)
    # inconsistent grids fail at pyramid construction
    with pytest.raises(ShapeError):
        FeaturePyramid(
            levels=(pyr.levels[0], pyr.levels[0], pyr.levels[2], pyr.levels[3]),
            grids=pyr.grids)
    # structurally fine pyramid from the wrong variant fails in decode
    other = make_pyramid(builtin_config("B1", num_classes=3), 64)
    with pytest.raises(ShapeError):
        decode(cfg, store, other)


def test_decode_gradcheck_on_tiny_pyramid():
    from dataclasses import replace
    cfg = replace(micro_config(num_classes=2), decoder_width=8)
    store = make_store(cfg, seed=3)
    names = store.names()
    shapes = {n: store[n].shape for n in names}
    rng = np.random.default_rng(4)
    levels = [rng.standard_normal((1, st.channels, g, g))
              for st, g in zip(cfg.stages, (8, 4, 2, 1))]

    def fn(*ts):
        pstore = {n: t for n, t in zip(names, ts[4:])}
        pyr = FeaturePyramid(levels=tuple(ts[:4]),
                             grids=((8, 8), (4, 4), (2, 2), (1, 1)))
        return decode(cfg, pstore, pyr)

    arrays = levels + [np.random.default_rng(5).standard_normal(shapes[n]) * 0.2
                       for n in names]
    assert gradcheck(fn, arrays, seed=6) < 1e-4


# published decoder head sizes at 150 classes, to one decimal in millions
@pytest.mark.parametrize("variant,millions", [
    ("B0", 0.4), ("B1", 0.6), ("B2", 3.3), ("B3", 3.3), ("B4", 3.3), ("B5", 3.3),
])
def test_decoder_param_count_published(variant, millions):
    cfg = builtin_config(variant, num_classes=150)
    assert round(decoder_param_count(cfg) / 1e6, 1) == millions


def test_decoder_param_count_matches_store():
    for variant in ("B0", "B2"):
        cfg = builtin_config(variant, num_classes=150)
        store = make_store(cfg)
        assert store.total_params() == decoder_param_count(cfg)


def test_decoder_param_count_hand_enumeration():
    # micro widths C_i=(8,16,24,32), width 8, 2 classes:
    #   unify: (8+16+24+32)*8 + 4*8 = 640 + 32
    #   fuse:  32*8 + 8 = 264
    #   cls:   8*2 + 2 = 18
    from dataclasses import replace
    cfg = replace(micro_config(num_classes=2), decoder_width=8)
    assert decoder_param_count(cfg) == 640 + 32 + 264 + 18
