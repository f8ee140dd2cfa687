import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recalnet import ops
from recalnet.blocks import SE, SCSE, ChannelSqueeze, ReCal, RegionSqueeze, recal_weight_formula
from recalnet.gradcheck import BLOCK_NAMES, run_block
from recalnet.nn import ParamStore, conv_census
from recalnet.tensor import ConfigError, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def weights(module) -> int:
    return ParamStore(module).census()


def test_res_count_c32():
    assert weights(RegionSqueeze(32, rng())) == 4 * 32 + 4 == 132


def test_chs_count_c32():
    assert weights(ChannelSqueeze(32, rng())) == 1024


@pytest.mark.parametrize("c", [32, 64, 128, 256, 512])
def test_recal_census_matches_formula_and_recount(c):
    block = ReCal(c, None)
    assert weights(block) == recal_weight_formula(c) == conv_census(block)


def test_recal_c512_is_273412():
    assert weights(ReCal(512, None)) == 273_412


def test_scse_census_c32():
    block = SCSE(32, rng())
    assert weights(block.cse) == 1024
    spatial = ParamStore(block.spatial)
    assert spatial.census() + spatial.census(kinds=("bias",)) == 33
    assert weights(block) == 1056


def test_reduction_must_divide():
    with pytest.raises(ConfigError):
        ChannelSqueeze(6, rng(), r=4)


def test_shapes():
    x = Tensor(rng().normal(size=(2, 16, 12, 12)))
    assert RegionSqueeze(16, rng())(x).shape == (2, 1, 12, 12)
    assert ChannelSqueeze(64, rng())(Tensor(rng().normal(size=(2, 64, 8, 8)))).shape == (2, 64, 1, 1)
    assert ReCal(8, rng())(Tensor(rng().normal(size=(1, 8, 16, 16)))).shape == (1, 8, 16, 16)


@given(n=st.integers(1, 3), c=st.sampled_from([2, 4, 6, 8]), h=st.integers(1, 10), w=st.integers(1, 10),
       seed=st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_recal_preserves_shape(n, c, h, w, seed):
    x = Tensor(rng(seed).normal(size=(n, c, h, w)))
    assert ReCal(c, rng(seed))(x).shape == (n, c, h, w)


def test_attention_ranges():
    block = ReCal(8, rng())
    maps = block.attention(Tensor(rng(1).normal(size=(2, 8, 9, 9))))
    assert maps.region.shape == (2, 1, 9, 9) and maps.channel.shape == (2, 8, 1, 1)
    assert np.all((maps.region.data >= 0) & (maps.region.data <= 1))
    assert np.all(maps.channel.data >= 0)


def test_res_zero_weights_gives_sigmoid_of_bias():
    block = RegionSqueeze(4, None)
    block.fuse.bias.data[...] = 0.3
    out = block(Tensor(np.full((1, 4, 7, 7), 2.0))).data
    np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.3)))


def test_chs_zero_input_uses_biases_only():
    block = ChannelSqueeze(4, rng())
    for p in (block.reduce.bias, block.expand.bias):
        p.data[...] = rng(2).normal(size=p.shape)
    out = block(Tensor(np.zeros((1, 4, 5, 5)))).data.ravel()
    hidden = np.maximum(block.reduce.bias.data, 0)
    expected = np.maximum(block.expand.weight.data[:, :, 0, 0] @ hidden + block.expand.bias.data, 0)
    np.testing.assert_allclose(out, expected)


def test_recal_grouped_fusion_has_no_cross_talk():
    c = 6
    block = ReCal(c, rng())
    concat = block.calibrated(Tensor(rng(1).normal(size=(2, c, 8, 8)))).data
    base = block.fuse(Tensor(concat)).data
    for q in range(c):
        bumped = concat.copy()
        bumped[:, 2 * q:2 * q + 2] += rng(q).normal(size=bumped[:, 2 * q:2 * q + 2].shape)
        delta = np.abs(block.fuse(Tensor(bumped)).data - base)
        others = [p for p in range(c) if p != q]
        assert delta[:, others].max() < 1e-12
        assert delta[:, q].max() > 1e-3


def test_recal_interleave_puts_channel_path_first():
    block = ReCal(2, rng())
    x = Tensor(rng(3).normal(size=(1, 2, 5, 5)))
    maps = block.attention(x)
    f_re = block.norm_region(ops.mul(x, maps.region)).data
    f_ch = block.norm_channel(ops.mul(x, maps.channel)).data
    concat = block.calibrated(x).data
    np.testing.assert_array_equal(concat[:, 0], f_ch[:, 0])
    np.testing.assert_array_equal(concat[:, 1], f_re[:, 0])
    np.testing.assert_array_equal(concat[:, 2], f_ch[:, 1])
    np.testing.assert_array_equal(concat[:, 3], f_re[:, 1])


def test_se_all_ones_gate_is_identity():
    block = SE(4, None)
    block.expand.bias.data[...] = 1e3   # sigmoid saturates to exactly 1.0
    x = rng().normal(size=(2, 4, 5, 5))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_scse_is_elementwise_max():
    block = SCSE(8, rng())
    x = Tensor(rng(4).normal(size=(2, 8, 6, 6)))
    expected = np.maximum(block.channel_path(x).data, block.spatial_path(x).data)
    np.testing.assert_array_equal(block(x).data, expected)


@pytest.mark.parametrize("name", BLOCK_NAMES)
def test_block_gradcheck(name):
    res = run_block(name)
    assert res.passed, res.line()
