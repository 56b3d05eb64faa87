import numpy as np
import pytest

from tinychirp import nn_core
from tinychirp.streaming_conv import (
    EQUIV_ATOL,
    EQUIV_RTOL,
    IncompleteStream,
    StreamOverflow,
    UnsupportedLayerInPrefix,
    conv_prefix,
    naive_conv_avgpool_oracle,
    naive_live_values,
    run_stream,
    stream_finalize,
    stream_init,
    stream_push,
)


def ones_prefix():
    return [nn_core.conv1d(1, 1, 3)], {0: {"weights": np.ones((1, 1, 3))}}


class TestHandCases:
    def test_ones_kernel_boundary_arithmetic(self):
        layers, weights = ones_prefix()
        # zero-padded edges: the four conv outputs are 2, 3, 3, 2
        points = naive_conv_avgpool_oracle(layers, weights, np.ones(4))
        assert points[0] == pytest.approx(2.5)  # mean of {2,3,3,2}
        y, _ = run_stream(layers, weights, np.ones(4))
        assert y[0] == pytest.approx(2.5)

    def test_zero_input_zero_output(self, cnn_time_model, cnn_time_weights):
        prefix, weights = conv_prefix(cnn_time_model, cnn_time_weights)
        y, _ = run_stream(prefix, weights, np.zeros(1024))
        np.testing.assert_array_equal(y, 0.0)

    def test_push_then_finalize_matches_run_stream(self):
        layers, weights = ones_prefix()
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, 100)
        state = stream_init(layers, weights, 100)
        for v in x:
            stream_push(state, v)
        y, stats = stream_finalize(state)
        y2, stats2 = run_stream(layers, weights, x)
        np.testing.assert_array_equal(y, y2)
        assert stats == stats2


class TestValidation:
    def test_empty_prefix(self):
        with pytest.raises(UnsupportedLayerInPrefix):
            stream_init([], {}, 100)

    def test_fully_connected_rejected(self):
        with pytest.raises(UnsupportedLayerInPrefix):
            stream_init([nn_core.fully_connected(4, 2)], {}, 100)

    def test_even_kernel_rejected(self):
        layer = nn_core.conv1d(1, 1, 4, padding="valid")
        with pytest.raises(UnsupportedLayerInPrefix):
            stream_init([layer], {0: {"weights": np.ones((1, 1, 4))}}, 100)

    def test_overflow(self):
        layers, weights = ones_prefix()
        state = stream_init(layers, weights, 2)
        stream_push(state, 1.0)
        stream_push(state, 1.0)
        with pytest.raises(StreamOverflow):
            stream_push(state, 1.0)

    def test_early_finalize(self):
        layers, weights = ones_prefix()
        state = stream_init(layers, weights, 10)
        stream_push(state, 1.0)
        with pytest.raises(IncompleteStream):
            stream_finalize(state)


class TestCnnTimePrefix:
    def test_matches_oracle_at_full_length(self, cnn_time_model, cnn_time_weights):
        prefix, weights = conv_prefix(cnn_time_model, cnn_time_weights)
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, 48000)
        y_stream, stats = run_stream(prefix, weights, x)
        y_naive = naive_conv_avgpool_oracle(prefix, weights, x)
        assert y_stream.shape == (8,)  # the 8 channel means feeding the head
        np.testing.assert_allclose(y_stream, y_naive, rtol=EQUIV_RTOL, atol=EQUIV_ATOL)

    def test_constant_peak_and_bound(self, cnn_time_model, cnn_time_weights):
        prefix, weights = conv_prefix(cnn_time_model, cnn_time_weights)
        rng = np.random.default_rng(4)
        peaks = []
        for n in (1024, 4096):
            _, stats = run_stream(prefix, weights, rng.uniform(-1, 1, n))
            peaks.append(stats.peak_buffered_values)
        assert peaks[0] == peaks[1]
        assert peaks[0] <= 64

    def test_running_mean_matches_sum_then_divide(self, cnn_time_model, cnn_time_weights):
        prefix, weights = conv_prefix(cnn_time_model, cnn_time_weights)
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, 48000)
        y_stream, _ = run_stream(prefix, weights, x)
        y_naive = naive_conv_avgpool_oracle(prefix, weights, x)
        assert np.abs(y_stream - y_naive).max() < 1e-9


def random_prefix(rng):
    layers = []
    weights = {}
    channels = 1
    for _ in range(int(rng.integers(1, 4))):
        out_c = int(rng.integers(1, 17))
        kernel = int(rng.choice([3, 5]))
        weights[len(layers)] = {
            "weights": rng.uniform(-0.5, 0.5, size=(out_c, channels, kernel))
        }
        layers.append(nn_core.conv1d(channels, out_c, kernel))
        channels = out_c
        if rng.random() < 0.5:
            layers.append(nn_core.relu())
        if rng.random() < 0.5:
            layers.append(nn_core.maxpool1d(2))
    return layers, weights


class TestRandomizedEquivalence:
    def test_forty_random_configs(self):
        rng = np.random.default_rng(2025)
        for _ in range(40):
            layers, weights = random_prefix(rng)
            n = int(rng.integers(64, 4097))
            x = rng.uniform(-1, 1, n)
            y_stream, stats = run_stream(layers, weights, x)
            y_naive = naive_conv_avgpool_oracle(layers, weights, x)
            np.testing.assert_allclose(
                y_stream, y_naive, rtol=EQUIV_RTOL, atol=EQUIV_ATOL
            )

    def test_peak_independent_of_length(self):
        rng = np.random.default_rng(77)
        for _ in range(5):
            layers, weights = random_prefix(rng)
            peaks = set()
            for n in (1024, 4096):
                x = rng.uniform(-1, 1, n)
                _, stats = run_stream(layers, weights, x)
                peaks.add(stats.peak_buffered_values)
            assert len(peaks) == 1


class TestOracleProperties:
    def test_final_mean_insensitive_to_emission_order(self):
        # the pooled mean is a commutative reduction over emitted points:
        # accumulating the last-layer points in any order gives the same y
        rng = np.random.default_rng(8)
        w = rng.uniform(-1, 1, (3, 1, 3))
        x = rng.uniform(-1, 1, 512)
        points = np.stack(
            [np.convolve(x, w[c, 0][::-1], mode="same") for c in range(3)]
        )
        y_stream, _ = run_stream(
            [nn_core.conv1d(1, 3, 3)], {0: {"weights": w}}, x
        )
        order = rng.permutation(512)
        y_shuffled = np.zeros(3)
        for k in order:
            y_shuffled += points[:, k] / 512
        np.testing.assert_allclose(y_stream, y_shuffled, rtol=1e-10, atol=1e-12)

    def test_permuting_output_channels_permutes_means(self):
        rng = np.random.default_rng(9)
        w = rng.uniform(-1, 1, (2, 1, 3))
        x = rng.uniform(-1, 1, 200)
        layers = [nn_core.conv1d(1, 2, 3)]
        y = naive_conv_avgpool_oracle(layers, {0: {"weights": w}}, x)
        y_swapped = naive_conv_avgpool_oracle(layers, {0: {"weights": w[::-1]}}, x)
        np.testing.assert_allclose(y[::-1], y_swapped)

    def test_scaling_weights_scales_outputs(self):
        rng = np.random.default_rng(10)
        w = rng.uniform(-1, 1, (3, 1, 3))
        x = rng.uniform(-1, 1, 200)
        layers = [nn_core.conv1d(1, 3, 3)]
        y = naive_conv_avgpool_oracle(layers, {0: {"weights": w}}, x)
        y_scaled = naive_conv_avgpool_oracle(layers, {0: {"weights": 2.5 * w}}, x)
        np.testing.assert_allclose(y_scaled, 2.5 * y, rtol=1e-12)


def test_conv_prefix_splits_before_average_pool(cnn_time_model, cnn_time_weights):
    prefix, weights = conv_prefix(cnn_time_model, cnn_time_weights)
    kinds = [l.kind for l in prefix]
    assert kinds == ["Conv1D", "ReLU", "MaxPool1D", "Conv1D", "MaxPool1D", "Dropout"]
    assert set(weights) == {0, 3}


def test_naive_live_values_counts_every_layer_output(cnn_time_model, cnn_time_weights):
    prefix, _ = conv_prefix(cnn_time_model, cnn_time_weights)
    # conv 4x48000, relu 4x48000, pool 4x24000, conv 8x24000, pool 8x12000,
    # dropout 8x12000
    assert naive_live_values(prefix, 48000) == 864000
