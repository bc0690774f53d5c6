"""Receptive-field analysis: pixelwise and 3x3-conv oracles, radius
arithmetic, batch-packing independence, and the PGM export."""

import numpy as np
import pytest

from mitseg.analysis import ErfMap, compute_erf, erf_radius, save_erf
from mitseg.configs import builtin_config
from mitseg.encoder import FeaturePyramid
from mitseg.errors import ShapeError
from mitseg.imageio import read_pgm
from mitseg.model import build
from mitseg.tensor import Tensor, conv2d


class ConvStubModel:
    """Four stacked strided convs posing as an encoder; no decoder.

    kernel=1 keeps every output unit pixel-local; kernel=3 (pad 1) taps a
    3x3 input neighborhood per downsampling step.
    """

    def __init__(self, kernel, seed=0):
        rng = np.random.default_rng(seed)
        self.kernel = kernel
        self.weights = []
        chans = [3, 4, 5, 6, 7]
        for cin, cout in zip(chans, chans[1:]):
            w = rng.standard_normal((cout, cin, kernel, kernel)).astype(np.float32)
            b = rng.standard_normal(cout).astype(np.float32)
            self.weights.append((Tensor(w), Tensor(b)))

    def encode(self, x):
        levels, grids = [], []
        cur = x
        for w, b in self.weights:
            cur = conv2d(cur, w, b, stride=2, pad=(self.kernel - 1) // 2)
            levels.append(cur)
            grids.append(cur.shape[2:])
        return FeaturePyramid(levels=tuple(levels), grids=tuple(grids))


def test_pixelwise_model_erf_is_single_center_pixel():
    model = ConvStubModel(kernel=1)
    images = [np.random.default_rng(i).random((3, 16, 16)) for i in range(3)]
    erf = compute_erf(model, 1, images)
    support = erf.values > 0
    assert support.sum() == 1
    # stage-1 center (4,4) on the 8x8 grid taps input pixel (8,8)
    assert support[8, 8]


def brute_force_input_support(model, image, stage, eps=1e-3):
    """Perturb every input pixel; mark pixels that move the seeded unit."""
    base = model.encode(Tensor(image[None].astype(np.float32)))
    lvl = base.levels[stage - 1].data[0]
    c, h, w = lvl.shape
    center = lvl[:, h // 2, w // 2].sum()
    support = np.zeros(image.shape[1:], dtype=bool)
    for ch in range(image.shape[0]):
        for i in range(image.shape[1]):
            for j in range(image.shape[2]):
                bumped = image.copy()
                bumped[ch, i, j] += eps
                out = model.encode(Tensor(bumped[None].astype(np.float32)))
                moved = out.levels[stage - 1].data[0][:, h // 2, w // 2].sum()
                if abs(moved - center) > 1e-6:
                    support[i, j] = True
    return support


def test_single_3x3_conv_erf_support_matches_brute_force():
    model = ConvStubModel(kernel=3, seed=1)
    image = np.random.default_rng(2).random((3, 16, 16)).astype(np.float32)
    erf = compute_erf(model, 1, [image])
    got_support = erf.values > 1e-9
    want_support = brute_force_input_support(model, image, 1)
    np.testing.assert_array_equal(got_support, want_support)
    # one stride-2 3x3 conv: exactly the 3x3 block around the center tap
    ys, xs = np.where(want_support)
    assert ys.min() == 7 and ys.max() == 9 and xs.min() == 7 and xs.max() == 9
    assert erf_radius(erf, 0.99) <= 2.0


def test_deeper_stages_widen_the_field():
    model = ConvStubModel(kernel=3, seed=3)
    images = [np.random.default_rng(10 + i).random((3, 32, 32)) for i in range(2)]
    r1 = erf_radius(compute_erf(model, 1, images), 0.5)
    r4 = erf_radius(compute_erf(model, 4, images), 0.5)
    assert r4 > r1


def test_random_b0_stage4_wider_than_stage1():
    model = build(builtin_config("B0", num_classes=8), seed=0)
    images = [np.random.default_rng(20 + i).random((3, 64, 64)) for i in range(8)]
    r1 = erf_radius(compute_erf(model, 1, images), 0.5)
    r4 = erf_radius(compute_erf(model, 4, images), 0.5)
    assert r4 > r1


def test_batch_packing_independence():
    model = ConvStubModel(kernel=3, seed=4)
    images = [np.random.default_rng(30 + i).random((3, 16, 16)) for i in range(4)]
    one = compute_erf(model, 2, images, batch_size=1)
    four = compute_erf(model, 2, images, batch_size=4)
    assert np.abs(one.values - four.values).max() < 1e-6


def test_erf_radius_delta_and_uniform():
    h = w = 17
    delta = np.zeros((h, w))
    delta[h // 2, w // 2] = 1.0
    assert erf_radius(ErfMap(values=delta, stage="1", n_images=1), 0.5) == 0.0
    uniform = np.ones((h, w))
    r = erf_radius(ErfMap(values=uniform, stage="1", n_images=1), 1.0)
    assert r == pytest.approx(np.hypot(h // 2, w // 2))   # half-diagonal


def test_erf_radius_monotone_in_mass():
    rng = np.random.default_rng(5)
    m = ErfMap(values=rng.random((21, 21)), stage="2", n_images=1)
    radii = [erf_radius(m, q) for q in (0.25, 0.5, 0.75, 0.99)]
    assert radii == sorted(radii)


def test_erf_rejects_bad_inputs():
    model = ConvStubModel(kernel=1)
    img = np.zeros((3, 16, 16))
    with pytest.raises(ShapeError):
        compute_erf(model, 7, [img])
    with pytest.raises(ShapeError):
        compute_erf(model, 1, [])
    with pytest.raises(ShapeError):
        compute_erf(model, 1, [img, np.zeros((3, 8, 8))])


def test_erf_pgm_export(tmp_path):
    model = ConvStubModel(kernel=3, seed=6)
    images = [np.random.default_rng(40).random((3, 16, 16))]
    erf = compute_erf(model, 2, images)
    path = str(tmp_path / "erf.pgm")
    r50, r90 = save_erf(erf, path)
    u8 = read_pgm(path)
    assert u8.shape == (16, 16)
    assert u8.max() == 255   # max-normalized
    sidecar = open(path + ".txt").read()
    assert f"r50: {r50:.3f}" in sidecar
    assert f"r90: {r90:.3f}" in sidecar
    assert "stage: 2" in sidecar
