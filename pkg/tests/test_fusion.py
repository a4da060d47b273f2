import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsteer import autodiff as ad
from flowsteer.autodiff import DimensionError, Tensor
from flowsteer.encoders import INPUT_HW, LATENT_DIM
from flowsteer.fusion import AcmParams, HybridEncoder, acm, early_fuse, hybrid_fuse_forward, swap_streams

TINY = ((4, 3, 2), (5, 3, 1), (6, 3, 1), (6, 3, 1), (7, 3, 1))
TINY_HW = (21, 23)


def rand(seed, *shape):
    return np.random.default_rng(seed).uniform(-1, 1, shape)


@pytest.mark.parametrize("k", [1, 2])
def test_early_fuse_channels_and_blocks(k):
    rgb, mod = rand(0, 2, 3, 6, 7), rand(1, 2, k, 6, 7)
    out = early_fuse(Tensor(rgb), Tensor(mod))
    assert out.shape == (2, 3 + k, 6, 7)
    np.testing.assert_array_equal(out.data[:, :3], rgb.astype(np.float32))
    np.testing.assert_array_equal(out.data[:, 3:], mod.astype(np.float32))


def test_early_fuse_errors():
    with pytest.raises(DimensionError):
        early_fuse(Tensor(rand(0, 1, 3, 6, 7)), Tensor(rand(0, 1, 2, 6, 8)))
    with pytest.raises(DimensionError):
        early_fuse(Tensor(rand(0, 1, 3, 6, 7)), Tensor(rand(0, 1, 3, 6, 7)))
    with pytest.raises(DimensionError):
        early_fuse(Tensor(rand(0, 1, 4, 6, 7)), Tensor(rand(0, 1, 1, 6, 7)))


def test_acm_saturated_and_closed_gates():
    x = rand(0, 2, 3, 4, 5)
    open_gate = AcmParams(Tensor(np.eye(3)), Tensor(np.full(3, 40.0)))
    np.testing.assert_allclose(acm(Tensor(x), open_gate).data, x, rtol=1e-6)
    closed = AcmParams(Tensor(np.eye(3)), Tensor(np.full(3, -60.0)))
    assert np.abs(acm(Tensor(x), closed).data).max() < 1e-20


def test_acm_half_gate():
    x = rand(0, 1, 1, 3, 3)
    x -= x.mean()
    gate = AcmParams(Tensor(np.zeros((1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_allclose(acm(Tensor(x), gate).data, 0.5 * x, rtol=1e-6)


def test_acm_channel_mismatch():
    with pytest.raises(DimensionError):
        acm(Tensor(rand(0, 1, 4, 2, 2)), AcmParams.init(3, np.random.default_rng(0)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_acm_never_amplifies(seed, bias):
    x = rand(seed, 2, 4, 3, 3) * 10
    p = AcmParams(Tensor(rand(seed + 1, 4, 4) * 3), Tensor(np.full(4, bias)))
    out = acm(Tensor(x), p).data
    assert np.all(np.abs(out) <= np.abs(x.astype(np.float32)))


@pytest.mark.parametrize("k", [1, 2])
def test_hybrid_output_is_32_wide(k):
    enc = HybridEncoder(3, k, np.random.default_rng(0))
    out = enc(Tensor(rand(1, 1, 3, *INPUT_HW)), Tensor(rand(2, 1, k, *INPUT_HW)))
    assert out.shape == (1, LATENT_DIM)


def test_degenerate_second_stream_equals_single_stream():
    enc = HybridEncoder(3, 2, np.random.default_rng(0), stages=TINY, input_hw=TINY_HW)
    for name, t in enc.stream2.params.items():
        t.data = np.zeros_like(t.data)
    for g in enc.stream2.gates:
        g.bias.data[:] = -60.0
    m1, m2 = Tensor(rand(1, 2, 3, *TINY_HW)), Tensor(rand(2, 2, 2, *TINY_HW))
    both = hybrid_fuse_forward(m1, m2, enc.stream1, enc.stream2, enc).data
    single = hybrid_fuse_forward(m1, None, enc.stream1, enc.stream2, enc).data
    np.testing.assert_allclose(both, single, rtol=1e-6, atol=1e-7)


def test_swapping_streams_and_inputs_is_symmetric():
    with ad.precision(np.float64):
        enc = HybridEncoder(3, 2, np.random.default_rng(0), stages=TINY, input_hw=TINY_HW)
        m1, m2 = Tensor(rand(1, 2, 3, *TINY_HW)), Tensor(rand(2, 2, 2, *TINY_HW))
        a = enc(m1, m2).data
        other = swap_streams(enc)
        b = other(m2, m1).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_gradients_reach_both_streams():
    enc = HybridEncoder(3, 1, np.random.default_rng(0), stages=TINY, input_hw=TINY_HW)
    m1, m2 = Tensor(rand(1, 2, 3, *TINY_HW)), Tensor(rand(2, 2, 1, *TINY_HW))
    k1, k2 = enc.stream1.convs.params["g1.kernel"], enc.stream2.convs.params["g1.kernel"]
    with ad.Tape() as tape:
        loss = ad.mean(ad.square(enc(m1, m2)))
    g = ad.backward(tape, loss, [k1, k2])
    assert np.abs(g[k1].data).max() > 0 and np.abs(g[k2].data).max() > 0


def test_hybrid_shape_errors():
    enc = HybridEncoder(3, 2, np.random.default_rng(0), stages=TINY, input_hw=TINY_HW)
    with pytest.raises(DimensionError):
        enc(Tensor(rand(1, 1, 3, *TINY_HW)), Tensor(rand(1, 1, 1, *TINY_HW)))
    with pytest.raises(DimensionError):
        enc(Tensor(rand(1, 1, 3, *TINY_HW)), Tensor(rand(1, 2, 2, *TINY_HW)))


def test_hybrid_parameter_names_are_unique_per_stream():
    enc = HybridEncoder(3, 2, np.random.default_rng(0), stages=TINY, input_hw=TINY_HW)
    names = list(enc.params)
    assert len(names) == len(set(names))
    assert "s1.g1.kernel" in names and "s2.acm5.bias" in names and "trunk.g5.kernel" in names
    assert enc.params["s1.g1.kernel"].shape[1] == 3 and enc.params["s2.g1.kernel"].shape[1] == 2
