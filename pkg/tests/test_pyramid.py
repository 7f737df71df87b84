"""Pyramid shape contracts, determinism, and gradient correctness."""
import numpy as np
import pytest

from lesiondet.nn import Tensor, ops
from lesiondet.nn.gradcheck import gradcheck
from lesiondet.pyramid import (
    BackboneSpec,
    FeaturePyramid,
    PyramidConfig,
    TinyBackbone,
    build_pyramid,
    lateral_merge,
    pyramid_shapes,
    upsample2x,
)

TINY = BackboneSpec(stage_channels=(4, 4, 6, 6, 8), stage_blocks=(0, 0, 0, 0, 0))


def make_models(mode="lfpn", channels=8, backbone=TINY, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    bb = TinyBackbone(backbone, rng)
    pyr = FeaturePyramid(backbone, PyramidConfig(mode=mode, channels=channels), rng)
    if dtype is not np.float32:
        for layers in (bb, pyr):
            from lesiondet.nn.layers import flatten_params

            for p in flatten_params(layers.params()).values():
                p.data = p.data.astype(dtype)
    return bb, pyr


class TestShapes:
    @pytest.mark.parametrize("size", [64, 128, 224, 1120])
    def test_lfpn_levels_and_strides(self, size):
        cfg = PyramidConfig(mode="lfpn", channels=16)
        shapes = pyramid_shapes(size, cfg)
        assert [s.level for s in shapes] == [0, 1, 2, 3, 4, 5]
        assert [s.stride for s in shapes] == [1, 2, 4, 8, 16, 32]
        assert shapes[0].height == size and shapes[0].width == size
        for a, b in zip(shapes, shapes[1:]):
            assert a.height == 2 * b.height and a.width == 2 * b.width

    @pytest.mark.parametrize("size", [64, 128, 224, 1120])
    def test_fpn_levels_top_ratio_4(self, size):
        shapes = pyramid_shapes(size, PyramidConfig(mode="fpn", channels=16))
        assert [s.stride for s in shapes] == [4, 8, 16, 32]
        assert size // shapes[0].height == 4

    def test_plain_is_single_stride_32_map(self):
        shapes = pyramid_shapes(224, PyramidConfig(mode="plain", channels=16))
        assert len(shapes) == 1
        assert shapes[0].stride == 32 and shapes[0].height == 7

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError, match="divisible by 32"):
            pyramid_shapes(100, PyramidConfig())
        with pytest.raises(ValueError, match="divisible by 32"):
            pyramid_shapes((65, 64), PyramidConfig())

    def test_1120_input_shapes(self):
        shapes = {s.level: s for s in pyramid_shapes(1120, PyramidConfig(mode="lfpn"))}
        assert shapes[5].height == 35  # backbone top at stride 32
        assert shapes[0].height == 1120


class TestBackbone:
    def test_stage_halving(self, rng):
        bb = TinyBackbone(TINY, rng)
        image = Tensor(rng.random((3, 64, 64), dtype=np.float32))
        feats = bb(image)
        assert [f.data.shape[1] for f in feats] == [32, 16, 8, 4, 2]
        assert [f.data.shape[0] for f in feats] == list(TINY.stage_channels)

    def test_rejects_indivisible_input(self, rng):
        bb = TinyBackbone(TINY, rng)
        with pytest.raises(ValueError, match="divisible by 32"):
            bb(Tensor(rng.random((3, 65, 64), dtype=np.float32)))

    def test_spec_needs_five_stages(self):
        with pytest.raises(ValueError):
            BackboneSpec(stage_channels=(8, 8, 8), stage_blocks=(0, 0, 0))


class TestOps:
    def test_upsample_examples(self):
        t = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]] * 3))
        up = upsample2x(t)
        assert up.data.shape == (3, 4, 4)
        np.testing.assert_array_equal(
            up.data[1], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        )

    def test_lateral_merge_additive_identities(self, rng):
        from lesiondet.nn import Conv2d

        proj = Conv2d(4, 8, 1, rng=rng)
        smooth = Conv2d(8, 8, 3, pad=1, rng=rng)
        bottom = Tensor(rng.standard_normal((4, 6, 6)).astype(np.float32))
        zero_td = Tensor(np.zeros((8, 6, 6), dtype=np.float32))
        merged = lateral_merge(bottom, zero_td, proj, smooth)
        expect = smooth(proj(bottom))
        np.testing.assert_allclose(merged.data, expect.data, atol=1e-6)

        zero_bottom = Tensor(np.zeros((4, 6, 6), dtype=np.float32))
        td = Tensor(rng.standard_normal((8, 6, 6)).astype(np.float32))
        merged2 = lateral_merge(zero_bottom, td, proj, smooth)
        # projection of zero is zero (bias-free contribution is the bias only)
        expect2 = smooth(ops.add(proj(zero_bottom), td))
        np.testing.assert_allclose(merged2.data, expect2.data, atol=1e-6)

    def test_lateral_merge_shape_mismatch(self, rng):
        from lesiondet.nn import Conv2d

        proj = Conv2d(4, 8, 1, rng=rng)
        smooth = Conv2d(8, 8, 3, pad=1, rng=rng)
        bottom = Tensor(np.zeros((4, 8, 8), dtype=np.float32))
        td = Tensor(np.zeros((8, 16, 16), dtype=np.float32))
        with pytest.raises(ValueError, match="mismatch"):
            lateral_merge(bottom, td, proj, smooth)


class TestBuildPyramid:
    @pytest.mark.parametrize("mode,size", [("lfpn", 64), ("lfpn", 128), ("fpn", 64),
                                           ("plain", 64), ("lfpn", 224), ("fpn", 224)])
    def test_emitted_shapes_match_prediction(self, rng, mode, size):
        bb, pyr = make_models(mode=mode)
        image = Tensor(rng.random((3, size, size), dtype=np.float32))
        levels = build_pyramid(image, bb, pyr)
        predicted = {s.level: s for s in pyramid_shapes(size, pyr.cfg)}
        assert set(levels) == set(predicted)
        for lvl, fmap in levels.items():
            spec = predicted[lvl]
            assert fmap.data.shape == (spec.channels, spec.height, spec.width)

    def test_lfpn_p0_matches_input_size(self, rng):
        bb, pyr = make_models(mode="lfpn")
        image = Tensor(rng.random((3, 64, 64), dtype=np.float32))
        levels = build_pyramid(image, bb, pyr)
        assert levels[0].data.shape == (8, 64, 64)

    def test_adjacent_levels_double(self, rng):
        bb, pyr = make_models(mode="lfpn")
        levels = build_pyramid(Tensor(rng.random((3, 96, 96), dtype=np.float32)), bb, pyr)
        for lvl in range(5):
            assert levels[lvl].data.shape[1] == 2 * levels[lvl + 1].data.shape[1]

    def test_all_levels_share_channel_width(self, rng):
        for mode in ("plain", "fpn", "lfpn"):
            bb, pyr = make_models(mode=mode, channels=12)
            levels = build_pyramid(Tensor(rng.random((3, 64, 64), dtype=np.float32)), bb, pyr)
            assert {f.data.shape[0] for f in levels.values()} == {12}

    def test_forward_determinism(self, rng):
        bb, pyr = make_models(mode="lfpn")
        image = Tensor(rng.random((3, 64, 64), dtype=np.float32))
        a = build_pyramid(image, bb, pyr)
        b = build_pyramid(image, bb, pyr)
        for lvl in a:
            np.testing.assert_array_equal(a[lvl].data, b[lvl].data)

    def test_gradients_match_finite_differences(self):
        # tiny backbone, quadratic probe loss over every level
        bb, pyr = make_models(mode="lfpn", channels=4,
                              backbone=BackboneSpec((2, 2, 3, 3, 4), (0, 0, 0, 0, 0)),
                              dtype=np.float64)
        from lesiondet.nn.layers import flatten_params

        params = flatten_params({"bb": bb.params(), "pyr": pyr.params()})
        n_params = sum(p.data.size for p in params.values())
        assert n_params <= 5000
        probe_rng = np.random.default_rng(42)
        image = Tensor(probe_rng.random((3, 32, 32)))
        probes = None

        def loss():
            nonlocal probes
            levels = build_pyramid(image, bb, pyr)
            if probes is None:
                probes = {
                    lvl: probe_rng.standard_normal(f.data.shape) for lvl, f in levels.items()
                }
            terms = [ops.smooth_l1_mean(f, probes[lvl]) for lvl, f in levels.items()]
            return ops.add_n(terms)

        err = gradcheck(loss, params, coords_per_tensor=6, h=1e-5,
                        rng=np.random.default_rng(7))
        assert err < 1e-3, f"gradient mismatch {err}"
