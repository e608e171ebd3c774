import numpy as np
import pytest

from atpn.config import ATPN_SMALL
from atpn.conv import conv2d
from atpn.layers import (
    MobileNetV3Block,
    MobileNetV3BlockSpec,
    MultiviewBlock,
    MultiviewBlockSpec,
    UpsampleFuse,
    coord_channels,
    coordconv,
    receptive_field,
)
from atpn.model import AtpnNet
from atpn.nn import Conv2d
from atpn.tensor import InvalidShapeError, Tensor


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


def zero_weights(module):
    for name, p in module.named_parameters():
        if p.kind == "weight":
            p.data[...] = 0.0
        elif name.endswith("beta") or p.kind == "bias":
            p.data[...] = 0.0


def test_mobilenet_block_stride_two_halves():
    block = MobileNetV3Block(8, MobileNetV3BlockSpec(3, 16, 32, 2, True))
    assert block(rand((2, 8, 28, 28))).shape == (2, 16, 14, 14)
    assert not block.has_residual


def test_mobilenet_residual_is_pipeline_plus_input():
    block = MobileNetV3Block(8, MobileNetV3BlockSpec(3, 8, 24, 1, True)).eval()
    x = rand((2, 8, 10, 10))
    assert block.has_residual
    np.testing.assert_array_equal(block(x).data, block.pipeline(x).data + x.data)


def test_mobilenet_zero_pipeline_is_shortcut():
    block = MobileNetV3Block(6, MobileNetV3BlockSpec(5, 6, 12, 1, False)).eval()
    zero_weights(block)
    x = rand((2, 6, 7, 7))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_mobilenet_rejects_wrong_channels():
    block = MobileNetV3Block(6, MobileNetV3BlockSpec(3, 6, 12))
    with pytest.raises(InvalidShapeError):
        block(rand((1, 5, 7, 7)))


def test_multiview_same_extent_and_zero_shortcut():
    block = MultiviewBlock(MultiviewBlockSpec(6, 6)).eval()
    x = rand((2, 6, 9, 9))
    assert block(x).shape == x.shape
    zero_weights(block)
    np.testing.assert_array_equal(block(x).data, x.data)


def test_multiview_projects_shortcut_when_channels_differ():
    block = MultiviewBlock(MultiviewBlockSpec(4, 10))
    assert block.shortcut is not None and block.shortcut.bias is None
    assert block(rand((2, 4, 6, 6))).shape == (2, 10, 6, 6)


def test_multiview_stacked_kernel_equals_separate_branches():
    block = MultiviewBlock(MultiviewBlockSpec(3, 4, branch_channels=2))
    x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 8, 8)))
    weights = [Tensor(w.data.astype(np.float64)) for w in block.branch_weights()]
    separate = np.concatenate([conv2d(x, w).data for w in weights], axis=1)
    stacked = conv2d(x, Tensor(block.stacked_kernel().data.astype(np.float64))).data
    np.testing.assert_allclose(stacked, separate, atol=1e-12)


def test_multiview_spec_validation():
    with pytest.raises(ValueError):
        MultiviewBlockSpec(4, 4, (3, 3, 5))
    with pytest.raises(ValueError):
        MultiviewBlockSpec(4, 4, (3, 5))


def test_coord_channels_grid():
    g = coord_channels(3, 3)
    np.testing.assert_array_equal(g[0], [[-1, 0, 1]] * 3)
    np.testing.assert_array_equal(g[1], g[0].T)
    np.testing.assert_array_equal(coord_channels(1, 1), np.zeros((2, 1, 1)))
    big = coord_channels(7, 5)
    assert big[0, 0, 0] == -1 and big[0, 0, -1] == 1 and big[1, -1, 0] == 1


def test_coordconv_adds_two_channels_shared_over_batch():
    out = coordconv(rand((3, 16, 5, 5)))
    assert out.shape == (3, 18, 5, 5)
    np.testing.assert_array_equal(out.data[0, 16:], out.data[2, 16:])


def test_coordconv_breaks_translation_equivariance():
    base = np.zeros((1, 1, 8, 8), dtype=np.float32)
    a, b = base.copy(), base.copy()
    a[0, 0, 2, 2] = 1.0
    b[0, 0, 2, 4] = 1.0
    conv = Conv2d(3, 2, 3, rng=np.random.default_rng(0))
    ya = conv(coordconv(Tensor(a))).data
    yb = conv(coordconv(Tensor(b))).data
    assert not np.allclose(np.roll(ya, 2, axis=3)[..., 3:], yb[..., 3:])


def test_upsample_fuse_shapes_and_errors():
    fuse = UpsampleFuse(12, 5)
    out = fuse(rand((2, 8, 28, 28)), rand((2, 12, 14, 14), 1))
    assert out.shape == (2, 13, 28, 28)
    with pytest.raises(InvalidShapeError):
        fuse(rand((2, 8, 28, 28)), rand((2, 12, 13, 13)))


def test_upsample_fuse_of_zeros_is_bias_map():
    fuse = UpsampleFuse(4, 3)
    fuse.up.bias.data[...] = [0.5, -1.0, 2.0]
    x = rand((1, 2, 8, 8))
    out = fuse(x, Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32))).data
    np.testing.assert_array_equal(out[:, :2], x.data)
    for c, v in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out[0, 2 + c] == np.float32(v))


def test_receptive_field_fold():
    assert receptive_field([(3, 2), (3, 1)]) == (7, 2)
    assert receptive_field([]) == (1, 1)


def test_nine_distinct_multiview_receptive_fields():
    rf = AtpnNet(ATPN_SMALL).multiview_receptive_fields()
    assert len(rf) == 9
    assert len(set(rf.values())) == 9
    assert {e for e, _ in rf} == {28, 14, 7}
