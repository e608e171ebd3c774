import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atpn import tensor as T
from atpn.conv import batch_norm, conv2d, conv_transpose2d
from atpn.tensor import DegenerateBatchError, InvalidShapeError, Parameter, StaleTapeError, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_mul_scales_elementwise():
    out = T.mul(t64([1, 2, 3]), t64([0.5, 0.5, 0.5]))
    np.testing.assert_array_equal(out.data, [0.5, 1.0, 1.5])


def test_clamp_min_floors_values():
    out = T.clamp_min(t64([0.3, 0.5, 0.9]), 0.5)
    np.testing.assert_array_equal(out.data, [0.5, 0.5, 0.9])


def test_clamp_min_subgradient_at_kink_is_one():
    x = Parameter(np.array([0.3, 0.5, 0.9]), dtype=np.float64)
    T.clamp_min(x, 0.5).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])


def test_add_zero_is_bitwise_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4)).astype(np.float32)
    out = T.add(Tensor(x), 0.0)
    assert out.data.tobytes() == x.tobytes()


def test_broadcast_rule_accepts_channel_vector_only():
    x = Tensor(np.ones((2, 3, 4, 4)))
    per_channel = Tensor(np.arange(3.0).reshape(1, 3, 1, 1))
    assert T.mul(x, per_channel).shape == (2, 3, 4, 4)
    with pytest.raises(InvalidShapeError):
        T.add(x, Tensor(np.ones((1, 1, 4, 1))))
    with pytest.raises(InvalidShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_conv_of_ones_gives_four():
    x = t64(np.ones((1, 1, 3, 3)))
    w = t64(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w, None, stride=1, padding="valid")
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_identity_kernel_reproduces_input():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 5))
    out = conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_same_padding_stride_two_halves_extent():
    x = t64(np.zeros((1, 2, 28, 28)))
    w = t64(np.zeros((4, 2, 3, 3)))
    assert conv2d(x, w, stride=2, padding="same").shape == (1, 4, 14, 14)
    assert conv2d(t64(np.zeros((1, 2, 7, 7))), w, stride=2).shape == (1, 4, 4, 4)


def test_conv_rejects_bad_group_arithmetic():
    with pytest.raises(InvalidShapeError):
        conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((4, 1, 3, 3))), groups=2)
    with pytest.raises(InvalidShapeError):
        conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 3))), padding="valid")


def test_deconv_doubles_extent():
    x = t64(np.zeros((1, 4, 7, 7)))
    w = t64(np.zeros((4, 3, 2, 2)))
    assert conv_transpose2d(x, w, stride=2).shape == (1, 3, 14, 14)


def test_deconv_stride_one_identity():
    x = np.random.default_rng(2).normal(size=(1, 1, 4, 4))
    out = conv_transpose2d(t64(x), t64(np.ones((1, 1, 1, 1))), stride=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("seed", range(5))
def test_conv_and_deconv_are_adjoint(seed):
    rng = np.random.default_rng(seed)
    cin, cout, h = 3, 4, 6
    w = rng.normal(size=(cout, cin, 2, 2))
    x = rng.normal(size=(2, cin, 2 * h, 2 * h))
    y = rng.normal(size=(2, cout, h, h))
    forward = conv2d(t64(x), t64(w), stride=2, padding="valid").data
    # deconv weight layout is [in, out, k, k]; the adjoint of conv uses the same array
    back = conv_transpose2d(t64(y), t64(w), stride=2).data
    assert abs(np.vdot(forward, y) - np.vdot(x, back)) < 1e-10


def test_activation_values():
    assert T.tanh(t64([0.0])).data[0] == 0.0
    np.testing.assert_allclose(T.softmax(t64([[0.0, 0.0]])).data, [[0.5, 0.5]])
    assert abs(T.swish(t64([1.0])).data[0] - 1.0 / (1.0 + np.exp(-1.0))) < 1e-15
    assert abs(T.swish(t64([1.0])).data[0] - 0.7310585786300049) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one_and_tanh_bounded(values):
    x = t64(np.array(values)[None])
    assert abs(T.softmax(x).data.sum() - 1.0) < 1e-6
    y = T.tanh(t64(np.array(values) / 10.0)).data
    assert np.all(np.abs(y) < 1.0)


def test_batchnorm_two_point_standardisation():
    x = t64(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    out = batch_norm(x, t64(np.ones(1)), t64(np.zeros(1)), np.zeros(1), np.ones(1), training=True, eps=1e-12)
    np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-9)


def test_batchnorm_infer_with_unit_stats_is_identity():
    x = np.random.default_rng(3).normal(size=(3, 2, 4, 4))
    out = batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), np.zeros(2), np.ones(2), training=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_train_mean_zero_and_running_stats_move():
    rng = np.random.default_rng(4)
    x = rng.normal(3.0, 2.0, size=(5, 3, 4, 4))
    rm, rv = np.zeros(3), np.ones(3)
    out = batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), rm, rv, training=True)
    assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.all(rm > 0.1)


def test_batchnorm_rejects_single_sample_batch():
    with pytest.raises(DegenerateBatchError):
        batch_norm(t64(np.ones((1, 2, 3, 3))), t64(np.ones(2)), t64(np.zeros(2)),
                   np.zeros(2), np.ones(2), training=True)


def test_structural_ops():
    a, b = t64(np.zeros((2, 8, 5, 5))), t64(np.zeros((2, 16, 5, 5)))
    assert T.concat_channels([a, b]).shape == (2, 24, 5, 5)
    with pytest.raises(InvalidShapeError):
        T.concat_channels([a, t64(np.zeros((2, 1, 4, 5)))])
    np.testing.assert_array_equal(T.global_avg_pool(t64(np.full((1, 2, 3, 3), 1.25))).data.reshape(-1), [1.25, 1.25])
    x = np.random.default_rng(5).normal(size=(3, 4))
    np.testing.assert_array_equal(T.dense(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)


def test_quadratic_gradient_is_input():
    x = Parameter(np.array([1.0, -2.0, 3.5]), dtype=np.float64)
    T.scale(T.square(x), 0.5).sum().backward()
    np.testing.assert_array_equal(x.grad, x.data)


def test_disconnected_parameter_gets_zero_gradient():
    x = Parameter(np.array([1.0, 2.0]), dtype=np.float64)
    p = Parameter(np.array([5.0]), dtype=np.float64)
    p.grad = np.array([7.0])
    p.zero_grad()
    T.square(x).sum().backward()
    np.testing.assert_array_equal(p.grad, [0.0])


def test_gradients_accumulate_over_paths():
    x = Parameter(np.array([2.0]), dtype=np.float64)
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0])


def test_second_backward_raises_stale_tape():
    x = Parameter(np.array([1.0, 2.0]), dtype=np.float64)
    loss = T.square(x).sum()
    loss.backward()
    with pytest.raises(StaleTapeError):
        loss.backward()


def test_backward_requires_scalar():
    x = Parameter(np.array([1.0, 2.0]), dtype=np.float64)
    with pytest.raises(InvalidShapeError):
        T.square(x).backward()


def test_frozen_parameter_gets_no_gradient():
    x = Parameter(np.array([1.0, 2.0]), dtype=np.float64)
    x.frozen = True
    y = Parameter(np.array([3.0]), dtype=np.float64)
    (T.square(x).sum() + y.sum()).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    np.testing.assert_array_equal(y.grad, [1.0])


def test_no_grad_records_nothing():
    x = Parameter(np.array([1.0]), dtype=np.float64)
    with T.no_grad():
        y = T.square(x)
    assert y._parents == ()


def test_determinism_of_forward_and_gradients():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32))
        w = Parameter(rng.normal(size=(4, 3, 3, 3)))
        out = T.swish(conv2d(x, w, stride=2))
        out.sum().backward()
        return out.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_tensor_dump_round_trip(tmp_path):
    a = np.random.default_rng(6).normal(size=(2, 3)).astype(np.float64)
    text = T.dump_tensor(a, tmp_path / "a.txt")
    assert text.splitlines()[0] == "float64 2 3"
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "a.txt"), a)
    np.testing.assert_array_equal(T.load_tensor(text), a)


def test_golden_dump_of_small_conv(tmp_path):
    # hand-computed: 3x3 ramp correlated with [[1,0],[0,-1]] valid
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.array([[[[1.0, 0.0], [0.0, -1.0]]]])
    out = conv2d(t64(x), t64(w), padding="valid").data
    golden = "float64 1 1 2 2\n-4.0 -4.0 -4.0 -4.0\n"
    assert T.dump_tensor(out) == golden


def test_rejects_integer_promotion_to_unsupported_dtype():
    t = Tensor(np.arange(3))
    assert t.dtype == np.float32
