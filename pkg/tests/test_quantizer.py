import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prunix import quantizer as Q
from prunix.model import Model, reference_architecture
from prunix.regularizers import sawtooth


def nearest_level_oracle(w, p, a):
    """Brute force: the closest of k*p for |k| <= a, ties to the larger magnitude."""
    levels = np.arange(-a, a + 1) * p
    d = np.abs(levels - w)
    best = np.flatnonzero(np.isclose(d, d.min(), rtol=0, atol=1e-12))
    return levels[best[np.argmax(np.abs(levels[best]))]]


class TestQuantize:
    def test_nearest_level_example(self):
        assert Q.quantize_values(0.14, 0.1, 15) == pytest.approx(0.1)
        assert nearest_level_oracle(0.14, 0.1, 15) == pytest.approx(0.1)

    def test_clamped_example(self):
        assert Q.quantize_values(0.95, 0.1, 3) == pytest.approx(0.3)
        assert nearest_level_oracle(0.95, 0.1, 3) == pytest.approx(0.3)

    def test_on_level_unchanged(self):
        w = np.array([0.3, -0.2, 0.0], np.float32)
        np.testing.assert_array_equal(Q.quantize_values(w, 0.1, 3), w)

    def test_half_away_from_zero(self):
        np.testing.assert_array_equal(Q.level_indices([0.25, -0.25, 0.05, -0.05], 0.1, 5),
                                      [3, -3, 1, -1])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = rng.uniform(0.01, 1)
            a = int(rng.integers(1, 16))
            w = rng.uniform(-(a + 2) * p, (a + 2) * p)
            assert Q.quantize_values(w, p, a) == pytest.approx(nearest_level_oracle(w, p, a),
                                                                abs=1e-6)

    def test_dequantized_value_is_index_times_p(self):
        q = Q.quantize(np.array([0.37, -1.2, 0.01]), 0.05, 15)
        np.testing.assert_array_equal(q.dequantize(),
                                      (q.indices * 0.05).astype(np.float32))
        assert q.shape == (3,)

    def test_clamp_bounds_indices(self):
        q = Q.quantize(np.linspace(-10, 10, 101), 0.1, 7)
        assert np.abs(q.indices).max() == 7

    def test_nonpositive_period(self):
        with pytest.raises(ValueError):
            Q.quantize([0.1], 0.0, 3)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=16), st.floats(0.01, 2),
           st.integers(1, 255))
    def test_idempotent(self, w, p, a):
        once = Q.quantize_values(np.array(w, np.float32), p, a)
        np.testing.assert_array_equal(Q.quantize_values(once, p, a), once)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 2), st.integers(1, 255), st.floats(-1, 1))
    def test_error_bound_in_range(self, p, a, u):
        w = u * (a + 0.5) * p
        assert abs(w - float(Q.quantize_values(w, p, a))) <= p / 2 + 1e-6 * max(1, abs(w))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(-255, 255), min_size=1, max_size=32))
    def test_split_round_trip(self, idx):
        idx = np.array(idx)
        pos, neg = Q.split_differential(idx)
        np.testing.assert_array_equal(pos - neg, idx)
        assert not np.any(pos * neg)
        assert (pos >= 0).all() and (neg >= 0).all()

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=32), st.integers(2, 8))
    def test_calibrated_never_exceeds_top_level(self, w, bits):
        w = np.array(w)
        p = Q.calibrate_scale(w, bits)
        assert np.abs(Q.level_indices(w, p)).max() <= Q.max_level(bits)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(-15, 15), st.floats(0.01, 2), st.integers(1, 15))
    def test_sawtooth_zero_is_fixed_point(self, k, p, a):
        w = np.float32(k * p)
        if sawtooth(w, p, a) == 0:
            # dequantizing computes index*p in float64 then rounds to float32:
            # the fixed point holds to that one rounding
            np.testing.assert_allclose(Q.quantize_values(w, p, a), w, rtol=2 ** -23, atol=0)


class TestSplit:
    @pytest.mark.parametrize("idx, want", [(3, (3, 0)), (-2, (0, 2)), (0, (0, 0))])
    def test_examples(self, idx, want):
        pos, neg = Q.split_differential(np.array([idx]))
        assert (int(pos[0]), int(neg[0])) == want

    def test_accepts_quantized_tensor(self):
        q = Q.quantize(np.array([0.3, -0.2]), 0.1, 3)
        pos, neg = Q.split_differential(q)
        np.testing.assert_array_equal(pos, [3, 0])
        np.testing.assert_array_equal(neg, [0, 2])


class TestCalibration:
    def test_example(self):
        assert Q.calibrate_scale(np.array([0.3, -1.5, 0.2]), 4) == pytest.approx(0.1)

    def test_all_zero(self):
        assert Q.calibrate_scale(np.zeros(5), 4) == 1.0

    def test_homogeneous(self):
        w = np.random.default_rng(1).normal(size=20)
        assert Q.calibrate_scale(2 * w, 6) == pytest.approx(2 * Q.calibrate_scale(w, 6))

    def test_empty(self):
        with pytest.raises(ValueError):
            Q.calibrate_scale(np.zeros(0), 4)


class TestScheme:
    def test_bits_and_clamp_ranges(self):
        with pytest.raises(ValueError):
            Q.QuantScheme(bits=1)
        with pytest.raises(ValueError):
            Q.QuantScheme(bits=9)
        with pytest.raises(ValueError):
            Q.QuantScheme(bits=4, clamp_levels=16)
        assert Q.QuantScheme(bits=8, clamp_levels=251).a == 251
        assert Q.QuantScheme(bits=4).a == 15

    def test_with_bits_keeps_top_of_range(self):
        s = Q.QuantScheme(4, None, {0: 0.1, 3: 0.03})
        s8 = s.with_bits(8)
        assert s8.per_layer_scale[0] * 255 == pytest.approx(0.1 * 15)
        assert s8.bits == 8

    def test_dict_round_trip(self):
        s = Q.QuantScheme(6, 60, {0: 0.1, 6: 1 / 3})
        assert Q.QuantScheme.from_dict(s.to_dict()) == s

    def test_quantize_model(self):
        m = Model(reference_architecture(), (1, 8, 8), 10, seed=0)
        m.biases[0].data[:] = 0.0123
        scheme = Q.QuantScheme(4).calibrate(m)
        qm, tensors = Q.quantize_model(m, scheme)
        assert Q.is_quantized(qm, scheme)
        assert not Q.is_quantized(m, scheme)
        for i in m.weight_layers:
            p = scheme.per_layer_scale[i]
            qw, qb = tensors[i]
            np.testing.assert_array_equal(qm.weights[i].data, qw.dequantize())
            np.testing.assert_array_equal(qm.biases[i].data, qb.dequantize())
            assert np.abs(qw.indices).max() == 15
            assert np.abs(qm.weights[i].data - m.weights[i].data).max() <= p / 2 + 1e-7
        # original untouched
        assert not np.array_equal(qm.weights[0].data, m.weights[0].data)

    def test_quantize_model_keeps_masks(self):
        m = Model(reference_architecture(), (1, 8, 8), 10, seed=0)
        mask = np.zeros(m.weights[3].shape, bool)
        mask[2] = True
        m.masks[3] = mask
        m.apply_masks()
        qm, _ = Q.quantize_model(m, Q.QuantScheme(4))
        assert not qm.weights[3].data[2].any()
