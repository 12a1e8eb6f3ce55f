import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdae import gradcheck as G
from mdae import nn
from mdae import tensor as T
from mdae.errors import ContractError, ShapeError
from mdae.nn import ModelSpec

TINY = ModelSpec((2, 4, 8), 16)

# (in, out) per conv for the default 32/64/128/256 spec, tallied by hand
DEFAULT_ENCODER = [(1, 32), (32, 32), (32, 32), (32, 64), (64, 64), (64, 64),
                   (64, 128), (128, 128), (128, 128), (128, 256), (256, 256), (256, 256)]
DEFAULT_DECODER = [(256 + 128, 256), (256, 256), (256, 256), (256 + 64, 128), (128, 128), (128, 128),
                   (128 + 32, 64), (64, 64), (64, 64)]
DEFAULT_HEAD = (64, 1)


def hand_param_count(decoders=3):
    convs = DEFAULT_ENCODER + DEFAULT_DECODER * decoders
    with_bn = sum(ci * co * 9 + co + 2 * co for ci, co in convs)
    head = DEFAULT_HEAD[0] * 9 + 1
    return with_bn + decoders * head


def test_default_parameter_count():
    reg = nn.init_params(ModelSpec(), 0)
    expected = hand_param_count()
    assert expected == 10_653_699
    assert reg.num_trainable() == expected
    assert nn.count_params(ModelSpec()) == expected


def test_decoder_schedule_halves_from_256():
    spec = ModelSpec()
    assert spec.decoder_channels == (256, 128, 64)
    assert spec.downsample == 8


def test_init_is_deterministic():
    a, b = nn.init_params(TINY, 5), nn.init_params(TINY, 5)
    assert a.names() == b.names()
    for n in a.names():
        assert a[n].tobytes() == b[n].tobytes()


def test_decoders_start_different():
    reg = nn.init_params(TINY, 0)
    assert not np.array_equal(reg["decoder0/block0/conv0/w"], reg["decoder1/block0/conv0/w"])


def test_init_respects_fan_in_bound():
    reg = nn.init_params(ModelSpec(), 3)
    for n in reg.names():
        if n.endswith("/w"):
            w = reg[n]
            assert np.abs(w).max() < np.sqrt(6.0 / (w.shape[1] * 9)), n
        elif n.endswith("/b") or n.endswith("/beta"):
            assert not reg[n].any()
        elif n.endswith("/gamma"):
            assert np.all(reg[n] == 1)


def test_every_parameter_in_one_group():
    reg = nn.init_params(TINY, 0)
    assert reg.groups() == ["encoder", "decoder0", "decoder1", "decoder2"]
    counted = sum(len(reg.names(g)) for g in reg.groups())
    assert counted == len(reg)


def test_encoder_shapes_default_spec():
    spec = ModelSpec()
    reg = nn.init_params(spec, 0)
    x = np.random.default_rng(0).random((1, 1, 64, 64), dtype=np.float32)
    bott, skips, _ = nn.encoder_forward(reg, spec, x)
    assert bott.shape == (1, 256, 8, 8)
    assert [s.shape for s in skips] == [(1, 32, 64, 64), (1, 64, 32, 32), (1, 128, 16, 16)]
    y, _ = nn.decoder_forward(reg, spec, 0, bott, skips)
    assert y.shape == (1, 1, 64, 64)
    assert np.all((y > 0) & (y < 1))


def test_batch_dimension_propagates():
    reg = nn.init_params(TINY, 0)
    x = np.random.default_rng(0).random((4, 1, 16, 16), dtype=np.float32)
    bott, skips, _ = nn.encoder_forward(reg, TINY, x)
    assert bott.shape[0] == 4 and all(s.shape[0] == 4 for s in skips)


def test_infer_mode_is_deterministic():
    reg = nn.init_params(TINY, 0)
    x = np.random.default_rng(0).random((2, 1, 16, 16), dtype=np.float32)
    nn.encoder_forward(reg, TINY, x, "train")
    a = nn.encoder_forward(reg, TINY, x, "infer")[0]
    b = nn.encoder_forward(reg, TINY, x, "infer")[0]
    assert a.tobytes() == b.tobytes()


def test_input_not_divisible_by_8():
    reg = nn.init_params(TINY, 0)
    with pytest.raises(ShapeError, match="pad"):
        nn.encoder_forward(reg, TINY, np.zeros((1, 1, 12, 16), np.float32))


def test_skip_resolution_mismatch():
    reg = nn.init_params(TINY, 0)
    bott = np.zeros((1, 16, 2, 2), np.float32)
    skips = [np.zeros((1, 2, 16, 16)), np.zeros((1, 4, 8, 8)), np.zeros((1, 8, 8, 8))]
    with pytest.raises(ShapeError, match="skip resolution"):
        nn.decoder_forward(reg, TINY, 0, bott, skips)


def test_no_merge_ablation_is_shape_valid():
    spec = ModelSpec((2, 4, 8), 16, merge=False)
    reg = nn.init_params(spec, 0)
    assert reg["decoder0/block0/conv0/w"].shape[1] == 16
    x = np.random.default_rng(0).random((2, 1, 16, 16), dtype=np.float32)
    bott, skips, _ = nn.encoder_forward(reg, spec, x)
    y, cache = nn.decoder_forward(reg, spec, 0, bott, skips)
    assert y.shape == x.shape
    g_b, g_s = nn.decoder_backward(reg, spec, cache, np.ones_like(y))
    assert g_b.shape == bott.shape and g_s == [None, None, None]


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 3), st.integers(1, 3), st.integers(1, 3), st.booleans())
def test_shape_law(n, hm, wm, merge):
    # n >= 2: train-mode batchnorm needs two values per channel at the 1x1 bottleneck
    spec = ModelSpec((2, 2, 4), 4, decoders=2, merge=merge)
    reg = nn.init_params(spec, 0)
    x = np.zeros((n, 1, 8 * hm, 8 * wm), np.float32) + 0.5
    bott, skips, _ = nn.encoder_forward(reg, spec, x)
    for i in range(2):
        assert nn.decoder_forward(reg, spec, i, bott, skips)[0].shape == x.shape


# -- backward ---------------------------------------------------------------

def _path_loss(reg, spec, x, target):
    bott, skips, ec = nn.encoder_forward(reg, spec, x)
    y, dc = nn.decoder_forward(reg, spec, 0, bott, skips)
    loss, lc = T.mse(y, target)
    return loss, (ec, dc, lc)


def test_zero_upstream_gradient_leaves_grads_unchanged():
    reg = nn.init_params(TINY, 0)
    x = np.random.default_rng(0).random((2, 1, 8, 8), dtype=np.float32)
    bott, skips, ec = nn.encoder_forward(reg, TINY, x)
    y, dc = nn.decoder_forward(reg, TINY, 0, bott, skips)
    nn.backward_through(reg, TINY, ec, dc, np.zeros_like(y))
    assert all(not reg.grad(n).any() for n in reg.names(trainable=True))


def test_whole_path_finite_differences():
    reg = nn.init_params(TINY, 11, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.random((2, 1, 8, 8))
    target = rng.random((2, 1, 8, 8))
    names = reg.names("encoder", trainable=True) + reg.names("decoder0", trainable=True)
    inputs = {"x": x, **{n: reg[n] for n in names}}
    state = {}

    def forward(**_):
        loss, state["caches"] = _path_loss(reg, TINY, inputs["x"], target)
        return loss

    def backward(r):
        ec, dc, lc = state["caches"]
        reg.zero_grad()
        gx = nn.backward_through(reg, TINY, ec, dc, T.mse_backward(lc, r))
        return [gx] + [reg.grad(n) for n in names]

    rep = G.gradcheck(forward, backward, inputs, max_probes=4, seed=3, name="tiny-model")
    assert rep.passed(1e-4), rep


def test_backward_accumulates():
    reg = nn.init_params(TINY, 0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x, t = rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))
    once = {}
    for rep in range(2):
        _, (ec, dc, lc) = _path_loss(reg, TINY, x, t)
        nn.backward_through(reg, TINY, ec, dc, T.mse_backward(lc))
        if rep == 0:
            once = {n: reg.grad(n).copy() for n in reg.names(trainable=True)}
    for n, g in once.items():
        np.testing.assert_allclose(reg.grad(n), 2 * g, rtol=1e-12, atol=1e-15)


def test_consumed_caches_rejected():
    reg = nn.init_params(TINY, 0)
    x = np.random.default_rng(0).random((2, 1, 8, 8), dtype=np.float32)
    _, (ec, dc, lc) = _path_loss(reg, TINY, x, x)
    g = T.mse_backward(lc)
    nn.backward_through(reg, TINY, ec, dc, g)
    with pytest.raises(ContractError):
        nn.backward_through(reg, TINY, ec, dc, g)


def test_registry_copy_group():
    reg = nn.init_params(TINY, 0)
    reg.copy_group("decoder0", "decoder2")
    for n in reg.names("decoder0"):
        assert np.array_equal(reg[n], reg["decoder2" + n[len("decoder0"):]])
