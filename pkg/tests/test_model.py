import itertools

import numpy as np
import pytest

from mdae.model import ConvLayer, MergedAutoencoder, average, conv_layer_table, count_macs
from mdae.nn import ModelSpec
from mdae.tensor import mse

from .test_nn import DEFAULT_DECODER, DEFAULT_ENCODER, DEFAULT_HEAD

SMALL = ModelSpec((2, 4, 8), 16)


def warmed(spec=SMALL, seed=0, n=4, size=16):
    """A model whose batchnorm running stats have been initialized by one train pass."""
    m = MergedAutoencoder.create(spec, seed)
    x = np.random.default_rng(seed).random((n, 1, size, size), dtype=np.float32)
    m.forward_all(x, "train")
    return m, x


def test_forward_all_shapes_default_spec():
    m = MergedAutoencoder.create(ModelSpec(), 0)
    x = np.random.default_rng(0).random((2, 1, 64, 64), dtype=np.float32)
    ys, _ = m.forward_all(x)
    assert len(ys) == 3 and all(y.shape == (2, 1, 64, 64) for y in ys)


def test_single_decoder_degenerates():
    m = MergedAutoencoder.create(ModelSpec((2, 4, 8), 16, decoders=1), 0)
    x = np.random.default_rng(0).random((2, 1, 16, 16), dtype=np.float32)
    ys, _ = m.forward_all(x)
    assert len(ys) == 1
    assert m.registry.groups() == ["encoder", "decoder0"]
    np.testing.assert_array_equal(m.predict_average(x), m.predict_all(x)[0])


def test_fresh_decoders_disagree():
    m = MergedAutoencoder.create(SMALL, 0)
    x = np.random.default_rng(0).random((2, 1, 16, 16), dtype=np.float32)
    ys, _ = m.forward_all(x)
    for a, b in itertools.combinations(ys, 2):
        assert np.abs(a - b).max() > 0


def test_encoder_runs_once_per_forward():
    m = MergedAutoencoder.create(SMALL, 0)
    x = np.zeros((1, 1, 16, 16), np.float32)
    m.forward_all(x)
    m.forward_all(x)
    assert m.encoder_calls == 2


def test_identical_decoders_average_to_each():
    m, x = warmed()
    m.registry.copy_group("decoder0", "decoder1")
    m.registry.copy_group("decoder0", "decoder2")
    ys = m.predict_all(x)
    avg = m.predict_average(x)
    for y in ys:
        np.testing.assert_array_equal(avg, y)


def test_predict_average_needs_running_stats():
    m = MergedAutoencoder.create(SMALL, 0)
    with pytest.raises(Exception, match="running statistics"):
        m.predict_average(np.zeros((1, 1, 16, 16), np.float32))


def test_average_is_permutation_invariant():
    m, x = warmed()
    ys = m.predict_all(x)
    ref = average(ys)
    for perm in itertools.permutations(ys):
        np.testing.assert_allclose(average(list(perm)), ref, rtol=0, atol=1e-7)


def test_averaging_never_worse_than_mean_decoder_mse():
    rng = np.random.default_rng(9)
    for seed in range(3):
        m, x = warmed(seed=seed)
        target = rng.random(x.shape, dtype=np.float32)
        ys = m.predict_all(x)
        for j in range(len(x)):
            per = [mse(y[j:j + 1], target[j:j + 1])[0] for y in ys]
            avg = mse(average([y[j:j + 1] for y in ys]), target[j:j + 1])[0]
            assert avg <= np.mean(per) + 1e-9


def test_single_conv_macs():
    assert count_macs([ConvLayer("c", 1, 1, 8, 8)]) == 576


def test_macs_scale_with_area():
    for spec in (ModelSpec(), SMALL, ModelSpec((2, 4, 8), 16, merge=False)):
        assert count_macs(spec, (128, 128)) == 4 * count_macs(spec, (64, 64))


def test_default_macs_match_hand_tally():
    scales = [64] * 3 + [32] * 3 + [16] * 3 + [8] * 3
    enc = sum(ci * co * 9 * s * s for (ci, co), s in zip(DEFAULT_ENCODER, scales))
    dscales = [16] * 3 + [32] * 3 + [64] * 3
    dec = sum(ci * co * 9 * s * s for (ci, co), s in zip(DEFAULT_DECODER, dscales))
    head = DEFAULT_HEAD[0] * DEFAULT_HEAD[1] * 9 * 64 * 64
    assert count_macs(ModelSpec(), (64, 64)) == enc + 3 * (dec + head)


def test_layer_table_names_are_unique():
    names = [layer.name for layer in conv_layer_table(ModelSpec(), 64, 64)]
    assert len(names) == len(set(names)) == 12 + 3 * 10
