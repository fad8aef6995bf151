import itertools
import math

import numpy as np
import pytest

from btcq import matrix, pipeline as pl, transform as tr
from btcq.binarize import SalientOverlay
from btcq.codebook import BinaryCodebook
from btcq.errors import ConfigError, IntegrityError, ShapeError


def signs(rng, shape):
    return np.where(rng.random(shape) < 0.5, 1.0, -1.0)


def tiny_layer(**overrides):
    """2x4 layer over a 3-entry codebook of 2-vectors."""
    cb = BinaryCodebook(
        matrix.pack_signs(np.array([[1, 1], [1, -1], [-1, -1]], dtype=np.float64))
    )
    fields = dict(
        n=2,
        m=4,
        v=2,
        codebook=cb,
        indices=np.array([0, 1, 2, 0]),
        alpha=np.array([1.0, 2.0]),
        mu=np.array([0.0, -1.0]),
    )
    fields.update(overrides)
    return pl.QuantizedLayer(**fields)


class TestQuantizeConfig:
    def test_defaults(self):
        cfg = pl.QuantizeConfig()
        assert (cfg.v, cfg.c) == (16, 512)
        assert cfg.salient_fraction == 0.0
        assert (cfg.split_points, cfg.arb_iters, cfg.codebook_iters) == (2, 15, 5)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"v": 0},
            {"c": 0},
            {"salient_fraction": 1.5},
            {"salient_fraction": -0.1},
            {"split_points": 4},
            {"arb_iters": -1},
            {"codebook_iters": 0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            pl.QuantizeConfig(**kwargs)


class TestQuantizedLayer:
    def test_valid_construction(self):
        layer = tiny_layer()
        assert layer.c == 3
        assert layer.index_count == 4

    def test_index_count_must_cover_weights(self):
        with pytest.raises(IntegrityError):
            tiny_layer(indices=np.array([0, 1, 2]))

    def test_index_range_checked(self):
        with pytest.raises(IntegrityError):
            tiny_layer(indices=np.array([0, 1, 3, 0]))

    def test_scale_shapes_checked(self):
        with pytest.raises(ShapeError):
            tiny_layer(alpha=np.array([1.0, 2.0, 3.0]))

    def test_v_must_match_codebook(self):
        with pytest.raises(ShapeError):
            tiny_layer(v=3)

    def test_overlay_shape_checked(self):
        mask = np.zeros((3, 4), dtype=bool)
        overlay = SalientOverlay(
            mask, matrix.pack_signs(np.ones((3, 4))), np.zeros(3)
        )
        with pytest.raises(ShapeError):
            tiny_layer(overlay=overlay)

    def test_fused_transform_width_checked(self):
        with pytest.raises(ShapeError):
            tiny_layer(transform=tr.identity_pair(6))

    def test_sign_stream_gathers_codebook_rows(self):
        layer = tiny_layer()
        expected = np.array(
            [[1, 1], [1, -1], [-1, -1], [1, 1]], dtype=np.float64
        )
        np.testing.assert_array_equal(layer.sign_stream(), expected)


class TestBtcQuantize:
    def test_stage_decomposition_oracle(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((64, 256))
        cfg = pl.QuantizeConfig(v=16, c=512, salient_fraction=0.05)
        layer = pl.btc_quantize(w, None, cfg)
        total = float(np.sum((w - pl.dequantize(layer)) ** 2))
        report = layer.report
        assert abs(total - report["total_error"]) <= 1e-9
        assert report["total_error"] == (
            report["post_codebook_error"] + report["overlay_error"]
        )

    def test_exact_mode_codebook_is_free(self):
        rng = np.random.default_rng(1)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            w = rng.standard_normal((8, 16))
            cfg = pl.QuantizeConfig(v=4, c=16, salient_fraction=0.1)
            layer = pl.btc_quantize(w, None, cfg)
            assert layer.report["codebook_exact"]
            assert (
                layer.report["post_codebook_error"]
                == layer.report["pre_codebook_error"]
            )

    def test_representable_input_zero_error(self):
        rng = np.random.default_rng(2)
        b0 = np.tile([1.0, -1.0], (6, 8))
        rng.shuffle(b0.T)  # keeps every row sign-balanced
        w = 0.75 * b0 + 0.5
        layer = pl.btc_quantize(w, None, pl.QuantizeConfig(v=4, c=16))
        assert layer.report["total_error"] == 0.0
        np.testing.assert_array_equal(pl.dequantize(layer), w)

    def test_overlay_present_only_with_salient_fraction(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((6, 20))
        plain = pl.btc_quantize(w, None, pl.QuantizeConfig(v=4, c=8))
        assert plain.overlay is None
        assert plain.report["overlay_error"] == 0.0
        salient = pl.btc_quantize(
            w, None, pl.QuantizeConfig(v=4, c=8, salient_fraction=0.1)
        )
        assert salient.overlay is not None
        assert salient.overlay.count == 6 * math.ceil(0.1 * 20)

    def test_grouping_presence_follows_split_points(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((4, 12))
        with_groups = pl.btc_quantize(w, None, pl.QuantizeConfig(v=4, c=8))
        assert with_groups.grouping is not None
        assert with_groups.grouping.group_count == 3
        without = pl.btc_quantize(
            w, None, pl.QuantizeConfig(v=4, c=8, split_points=0)
        )
        assert without.grouping is None

    def test_fused_transform_equals_direct_quantization(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((8, 12))
        pair = tr.TransformPair(
            signs(rng, 12), np.eye(3) + 0.2 * rng.standard_normal((3, 3)), np.eye(4)
        )
        cfg = pl.QuantizeConfig(v=4, c=32)
        fused = pl.btc_quantize(w, pair, cfg)
        direct = pl.btc_quantize(tr.inverse_transform_weight(w, pair), None, cfg)
        np.testing.assert_array_equal(
            fused.codebook.C.words, direct.codebook.C.words
        )
        np.testing.assert_array_equal(fused.indices, direct.indices)
        np.testing.assert_array_equal(fused.alpha, direct.alpha)
        np.testing.assert_array_equal(fused.mu, direct.mu)
        assert fused.transform is pair

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((16, 32))
        cfg = pl.QuantizeConfig(v=8, c=16, salient_fraction=0.05)
        a = pl.btc_quantize(w, None, cfg)
        b = pl.btc_quantize(w, None, cfg)
        np.testing.assert_array_equal(a.codebook.C.words, b.codebook.C.words)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.alpha, b.alpha)
        assert a.report == b.report

    def test_index_count_covers_unaligned_shapes(self):
        rng = np.random.default_rng(7)
        for n, m, v in [(5, 7, 3), (3, 3, 4), (1, 10, 16), (2, 9, 5)]:
            w = rng.standard_normal((n, m))
            layer = pl.btc_quantize(w, None, pl.QuantizeConfig(v=v, c=4))
            assert layer.index_count == -(-(n * m) // v)
            assert pl.dequantize(layer).shape == (n, m)

    def test_full_saliency_moves_all_error_to_overlay(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((4, 8))
        layer = pl.btc_quantize(
            w, None, pl.QuantizeConfig(v=4, c=2, salient_fraction=1.0)
        )
        assert layer.report["post_codebook_error"] == 0.0
        total = float(np.sum((w - pl.dequantize(layer)) ** 2))
        np.testing.assert_allclose(total, layer.report["overlay_error"], atol=1e-12)


class TestDequantize:
    def test_zero_alpha_constant_rows(self):
        layer = tiny_layer(alpha=np.zeros(2), mu=np.array([3.0, -2.0]))
        out = pl.dequantize(layer)
        np.testing.assert_array_equal(out[0], np.full(4, 3.0))
        np.testing.assert_array_equal(out[1], np.full(4, -2.0))

    def test_manual_reconstruction(self):
        layer = tiny_layer()
        # row 0: vectors [1,1],[1,-1] with alpha 1 mu 0
        # row 1: vectors [-1,-1],[1,1] with alpha 2 mu -1
        expected = np.array([[1, 1, 1, -1], [-3, -3, 1, 1]], dtype=np.float64)
        np.testing.assert_array_equal(pl.dequantize(layer), expected)

    def test_pad_vectors_are_dropped(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((5, 7))
        layer = pl.btc_quantize(w, None, pl.QuantizeConfig(v=3, c=64))
        dense_cb = matrix.unpack_signs(layer.codebook.C)
        flat = dense_cb[layer.indices].reshape(-1)
        assert flat.size == 36  # 12 vectors of 3 cover 35 weights + 1 pad
        expected = (
            layer.alpha[:, None] * flat[:35].reshape(5, 7) + layer.mu[:, None]
        )
        np.testing.assert_array_equal(pl.dequantize(layer), expected)

    def test_overlay_contribution_added(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((6, 12))
        layer = pl.btc_quantize(
            w, None, pl.QuantizeConfig(v=4, c=8, salient_fraction=0.25)
        )
        base = pl.dequantize(
            tiny_layer(
                n=6,
                m=12,
                v=4,
                codebook=layer.codebook,
                indices=layer.indices,
                alpha=layer.alpha,
                mu=layer.mu,
            )
        )
        np.testing.assert_array_equal(
            pl.dequantize(layer), base + layer.overlay.contribution()
        )

    def test_corrupted_index_rejected(self):
        layer = tiny_layer()
        layer.indices = np.array([0, 1, 5, 0])  # bypasses construction check
        with pytest.raises(IntegrityError):
            pl.dequantize(layer)


class TestLutPath:
    def test_plan_shape(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((6, 16))
        layer = pl.btc_quantize(w, None, pl.QuantizeConfig(v=4, c=16))
        plan = pl.plan_from_layer(layer, mu_seg=4)
        assert plan.index.shape == (6, 4)
        assert plan.n == 16
        assert plan.out_rows == 6

    def test_unaligned_rows_rejected(self):
        rng = np.random.default_rng(12)
        w = rng.standard_normal((4, 10))
        layer = pl.btc_quantize(w, None, pl.QuantizeConfig(v=4, c=8))
        with pytest.raises(ConfigError):
            pl.plan_from_layer(layer)

    def test_matches_dense_matmul_on_dequantized(self):
        for seed, (n, m, v, c, frac, mu_seg) in enumerate(
            [
                (8, 16, 8, 16, 0.0, 8),
                (6, 32, 16, 64, 0.1, 8),
                (5, 24, 8, 4, 0.25, 4),
                (3, 16, 16, 2, 0.0, 4),
            ]
        ):
            rng = np.random.default_rng(100 + seed)
            w = rng.standard_normal((n, m))
            layer = pl.btc_quantize(
                w, None, pl.QuantizeConfig(v=v, c=c, salient_fraction=frac)
            )
            x = rng.standard_normal((7, m))
            got = pl.layer_matmul(x, layer, mu_seg=mu_seg)
            want = matrix.matmul(x, pl.dequantize(layer))
            rel = np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-30)
            assert rel <= 1e-6


class TestEffectiveBits:
    def test_published_anchor_points(self):
        assert pl.effective_bits(20, 65536, 4096, 4096)["index_bits_per_weight"] == 0.8
        assert pl.effective_bits(10, 256, 64, 64)["index_bits_per_weight"] == 0.8
        assert pl.nm_mask_bits(2, 4) == 1.25

    def test_single_entry_codebook_needs_no_indices(self):
        out = pl.effective_bits(8, 1, 16, 16)
        assert out["index_bits_per_weight"] == 0.0
        assert out["total_bits"] == 8  # codebook only

    def test_field_consistency(self):
        out = pl.effective_bits(16, 512, 64, 256)
        assert out["codebook_bits"] == 16 * 512
        assert out["total_bits"] == 16 * 512 + 9 * 64 * 256 / 16
        np.testing.assert_allclose(
            out["bits_per_weight"], out["total_bits"] / (64 * 256), rtol=0
        )

    def test_codebook_overhead_vanishes_at_scale(self):
        fractions = []
        for n in [64, 256, 1024, 4096]:
            out = pl.effective_bits(16, 512, n, n)
            fractions.append(out["codebook_bits"] / out["total_bits"])
        assert all(b < a for a, b in zip(fractions, fractions[1:]))

    def test_validation(self):
        with pytest.raises(ConfigError):
            pl.effective_bits(0, 4, 2, 2)
        with pytest.raises(ConfigError):
            pl.effective_bits(4, 0, 2, 2)
        with pytest.raises(ConfigError):
            pl.effective_bits(4, 4, 0, 2)


class TestNmMaskBits:
    def test_anchor_values(self):
        assert pl.nm_mask_bits(2, 4) == 1.25
        assert pl.nm_mask_bits(4, 4) == 1.0
        assert pl.nm_mask_bits(1, 4) == 0.75

    def test_matches_enumerated_mask_count(self):
        for group in range(1, 9):
            for keep in range(1, group + 1):
                count = sum(
                    1 for _ in itertools.combinations(range(group), keep)
                )
                bits = 0
                while 2**bits < count:
                    bits += 1
                assert pl.nm_mask_bits(keep, group) == (keep + bits) / group

    def test_validation(self):
        with pytest.raises(ConfigError):
            pl.nm_mask_bits(0, 4)
        with pytest.raises(ConfigError):
            pl.nm_mask_bits(5, 4)


class TestFitTransform:
    def small_fit(self, seed=0):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((16, 16))
        x = rng.standard_normal((8, 16))
        cfg = pl.FitConfig(
            v=8, c=64, arb_iters=4, sign_sweeps=1, p_iters=1, top_k=4
        )
        return pl.fit_transform(w, x, cfg), w, x

    def test_descent_and_monotone_trace(self):
        result, _, _ = self.small_fit()
        trace = result.trace
        assert result.final <= result.initial
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert result.final == trace[-1]

    def test_trace_concatenation_drops_duplicate_boundary(self):
        result, _, _ = self.small_fit()
        assert len(result.trace) == len(result.sign_trace) + len(result.p_trace) - 1
        assert result.p_trace[0] == result.sign_trace[-1]

    def test_fitted_pair_is_usable(self):
        result, w, _ = self.small_fit()
        assert result.pair.d == 16
        layer = pl.btc_quantize(w, result.pair, pl.QuantizeConfig(v=8, c=64))
        assert layer.transform is result.pair

    def test_deterministic(self):
        r1, _, _ = self.small_fit(3)
        r2, _, _ = self.small_fit(3)
        assert r1.trace == r2.trace
        np.testing.assert_array_equal(r1.pair.sigma, r2.pair.sigma)
        np.testing.assert_array_equal(r1.pair.p1, r2.pair.p1)

    def test_calibration_width_checked(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ShapeError):
            pl.fit_transform(
                rng.standard_normal((4, 8)), rng.standard_normal((4, 6))
            )
