import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atpn.config import ATPN_DESK, ATPN_SMALL, ATPN_TINY
from atpn.heatmap import InvalidInputError, fuse, generate_heatmap
from atpn.model import AtpnNet, report_budget
from atpn.nn import Dense
from atpn.tensor import InvalidShapeError, Tensor


@pytest.fixture(scope="module")
def small():
    return AtpnNet(ATPN_SMALL, seed=0).eval()


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).random((2, 3, 112, 112)).astype(np.float32)


def test_heatmap_cell_values():
    hm = generate_heatmap(np.array([[0.0, 0.0]]), (28, 28))
    assert hm[0, 0] == 1.0
    assert hm[0, 3] == 0.5
    assert hm[0, 8] == 0.5
    assert hm[0, 1] == 1 / math.sqrt(2)


def test_heatmap_range_and_monotone_in_distance():
    rng = np.random.default_rng(1)
    shape = rng.random((5, 2))
    hm = generate_heatmap(shape, (28, 28))
    assert hm.min() >= 0.5 and hm.max() <= 1.0
    px = shape * 27
    ys, xs = np.mgrid[0:28, 0:28]
    d = np.min(np.hypot(xs[..., None] - px[:, 0], ys[..., None] - px[:, 1]), axis=-1)
    order = np.argsort(d.ravel(), kind="stable")
    assert np.all(np.diff(hm.ravel()[order]) <= 0)


def test_heatmap_outside_landmarks_still_count():
    # landmark sits at pixel (-2.7, 13.5), left of the grid
    hm = generate_heatmap(np.array([[-0.1, 0.5]]), (28, 28))
    d = math.hypot(2.7, 0.5)
    assert abs(hm[13, 0] - 1 / math.sqrt(1 + d)) < 1e-12


def test_heatmap_batched_and_errors():
    shapes = np.random.default_rng(2).random((3, 4, 2))
    assert generate_heatmap(shapes).shape == (3, 28, 28)
    assert generate_heatmap(shapes.reshape(3, 8)).shape == (3, 28, 28)
    with pytest.raises(InvalidInputError):
        generate_heatmap(np.zeros((0, 2)))


def test_fuse_identity_and_half():
    f = Tensor(np.random.default_rng(3).normal(size=(2, 4, 28, 28)).astype(np.float32))
    assert fuse(f, np.ones((28, 28))).data.tobytes() == f.data.tobytes()
    np.testing.assert_array_equal(fuse(f, np.full((28, 28), 0.5)).data, np.float32(0.5) * f.data)
    with pytest.raises(InvalidShapeError):
        fuse(f, np.ones((14, 14)))


def test_fuse_single_landmark_scales_cells():
    f = Tensor(np.ones((1, 2, 28, 28), dtype=np.float32))
    hm = generate_heatmap(np.array([[10 / 27, 20 / 27]]))
    out = fuse(f, hm).data
    assert np.all(out[:, :, 20, 10] == 1.0)
    far = hm == 0.5
    assert np.all(out[0, 0][far] == 0.5)


def test_fuse_locality():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(1, 3, 28, 28))
    hm = generate_heatmap(rng.random((6, 2)))
    base = fuse(Tensor(f), hm).data
    g = f.copy()
    g[0, 1, 5, 7] += 1.0
    diff = fuse(Tensor(g), hm).data != base
    assert diff.sum() == 1 and diff[0, 1, 5, 7]


def test_backbone_extents(small, images):
    f28, f14, f7 = small.backbone_forward(images)
    assert f28.shape[2:] == (28, 28) and f14.shape[2:] == (14, 14) and f7.shape[2:] == (7, 7)
    with pytest.raises(InvalidShapeError):
        small.backbone_forward(np.zeros((1, 3, 96, 96), dtype=np.float32))


def test_identical_images_identical_features(small, images):
    batch = np.stack([images[0], images[0]])
    f28, _, _ = small.backbone_forward(batch)
    np.testing.assert_array_equal(f28.data[0], f28.data[1])


def test_zero_image_gives_finite_outputs(small):
    out = small.predict(np.zeros((2, 3, 112, 112), dtype=np.float32))
    assert all(np.isfinite(v).all() for v in out.values())


def test_zero_regressor_returns_mean_shape():
    net = AtpnNet(ATPN_DESK, seed=1).eval()
    net.alignment.regress.weight.data[...] = 0.0
    net.alignment.regress.bias.data[...] = 0.0
    out = net.predict(np.random.default_rng(5).random((3, 3, 112, 112)).astype(np.float32))
    for lm in out["landmarks"]:
        np.testing.assert_array_equal(lm.reshape(-1), net.mean_shape)
    assert out["landmarks"].shape == (3, 12, 2)


def test_full_forward_bounds_and_determinism(small, images):
    a = small.predict(images)
    b = small.predict(images)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert np.all(np.abs(a["pose"]) <= math.pi)
    assert np.all((a["confidence"] >= 0) & (a["confidence"] <= 1))
    np.testing.assert_array_equal(a["heatmap"], generate_heatmap(a["landmarks"]))
    out = small.forward(Tensor(images))
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1e4, 1e4), st.integers(0, 2**31 - 1))
def test_pose_bounded_for_extreme_inputs(amplitude, seed):
    net = _tiny()
    x = np.random.default_rng(seed).normal(size=(2, 3, 32, 32)) * amplitude
    out = net.predict(x.astype(np.float32))
    assert np.all(np.abs(out["pose"]) <= math.pi)
    assert np.all((out["confidence"] >= 0) & (out["confidence"] <= 1))


_TINY = []


def _tiny():
    if not _TINY:
        _TINY.append(AtpnNet(ATPN_TINY, seed=0).eval())
    return _TINY[0]


def test_zero_logits_give_zero_pose_and_half_confidence():
    net = AtpnNet(ATPN_TINY, seed=2).eval()
    for head in (net.pose, net.tracking):
        head.out.weight.data[...] = 0.0
        head.out.bias.data[...] = 0.0
    out = net.predict(np.random.default_rng(6).random((2, 3, 32, 32)).astype(np.float32))
    np.testing.assert_array_equal(out["pose"], 0.0)
    np.testing.assert_array_equal(out["confidence"], 0.5)


def test_dense_parameter_count():
    assert Dense(10, 3).num_parameters() == 33


def test_default_budget_within_bands():
    b = report_budget(ATPN_SMALL)
    assert 0.8e6 <= b.params["backbone+alignment"] <= 1.6e6
    assert 0.03e9 <= b.macs["backbone+alignment"] <= 0.12e9
    assert 0.1e6 <= b.params["tracking"] <= 0.3e6
    assert b.summary().splitlines()[0] == "component params macs"
