"""Backbone structure: parameter census, shape contract, determinism."""

import numpy as np
import pytest

from cmoe.backbone import MIN_INPUT, REPR_DIM, Backbone, BasicBlock
from cmoe.errors import ShapeError
from cmoe.tensor import Tensor

# Frozen census; any architecture drift must show up here first.
EXPECTED_COUNTS = {
    "stem_conv": 3136,
    "stem_bn": 128,
    "layer1": 147968,
    "layer2": 525568,
    "layer3": 2099712,
    "layer4": 8393728,
    "attn_pool": 1050624,
    "trunk": 11170240,
    "total": 12220864,
}


def test_parameter_census_frozen():
    assert Backbone(np.random.default_rng(0)).describe() == EXPECTED_COUNTS


def test_census_arithmetic_from_first_principles():
    # stem: 64 filters of 1x7x7, no bias; its BN holds gamma+beta
    assert EXPECTED_COUNTS["stem_conv"] == 64 * 1 * 7 * 7
    assert EXPECTED_COUNTS["stem_bn"] == 2 * 64
    # stage 1 keeps 64 channels: four 3x3 convs plus four BNs, no projection
    assert EXPECTED_COUNTS["layer1"] == 4 * (64 * 64 * 9) + 4 * 2 * 64
    # attention pooling: four 512x512 projections with biases
    assert EXPECTED_COUNTS["attn_pool"] == 4 * (512 * 512 + 512)


def test_output_is_n_by_512(rng):
    net = Backbone(np.random.default_rng(0))
    out = net(Tensor(rng.standard_normal((2, 1, 60, 48)).astype(np.float32)), min_size=None)
    assert out.shape == (2, REPR_DIM)


def test_rejects_bad_inputs(rng):
    net = Backbone(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net(Tensor(rng.standard_normal((2, 60, 48)).astype(np.float32)))
    with pytest.raises(ShapeError):
        net(Tensor(rng.standard_normal((2, 3, 60, 48)).astype(np.float32)))
    with pytest.raises(ShapeError):
        net(Tensor(rng.standard_normal((2, 1, 16, 60)).astype(np.float32)))  # under MIN_INPUT


def test_min_size_none_admits_tiny_inputs(rng):
    net = Backbone(np.random.default_rng(0))
    out = net(Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32)), min_size=None)
    assert out.shape == (1, REPR_DIM)


def test_min_input_boundary(rng):
    net = Backbone(np.random.default_rng(0))
    out = net(Tensor(rng.standard_normal((1, 1, MIN_INPUT, MIN_INPUT)).astype(np.float32)))
    assert out.shape == (1, REPR_DIM)


def test_eval_forward_deterministic(rng):
    net = Backbone(np.random.default_rng(0)).eval()
    x = Tensor(rng.standard_normal((2, 1, 36, 40)).astype(np.float32))
    a = net(x).data.copy()
    b = net(x).data
    np.testing.assert_array_equal(a, b)


def test_same_seed_same_init():
    a = Backbone(np.random.default_rng(11))
    b = Backbone(np.random.default_rng(11))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_basic_block_shapes(rng):
    blk = BasicBlock(8, 8, np.random.default_rng(0), stride=1)
    x = Tensor(rng.standard_normal((2, 8, 10, 12)).astype(np.float32))
    assert blk(x).shape == (2, 8, 10, 12)
    assert blk.proj is None  # identity skip when nothing changes

    down = BasicBlock(8, 16, np.random.default_rng(0), stride=2)
    assert down(x).shape == (2, 16, 5, 6)
    assert down.proj is not None


def test_basic_block_identity_skip_at_zero_weights(rng):
    # zeroing the residual branch leaves ReLU(x): the skip really is identity
    blk = BasicBlock(4, 4, np.random.default_rng(0), stride=1).eval()
    for _, p in blk.named_parameters():
        if p.data.ndim == 4:  # conv kernels
            p.data[...] = 0.0
    x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
    out = blk(Tensor(x)).data
    np.testing.assert_allclose(out, np.maximum(x, 0.0), atol=1e-6)
