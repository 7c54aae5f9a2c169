import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftfd import checkpoint
from ftfd.gradcheck import check_gradients
from ftfd.tensor import (
    BatchNormState,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    batch_norm,
    channel_avg_pool,
    channel_max_pool,
    concat_channels,
    conv2d,
    dropout,
    fully_connected,
    global_avg_pool,
    mul_broadcast,
    reduce_sum,
    relu,
    scale,
    sigmoid,
    split_channels,
)


def loop_conv2d(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar probe sum(out * R) with a fixed random R."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return reduce_sum(mul_by_const(out, r))


def mul_by_const(x: Tensor, r: np.ndarray) -> Tensor:
    from ftfd.tensor import _result

    return _result(x.data * r, (x,), lambda g: (g * r,))


class TestConv2d:
    def test_identity_kernel(self):
        out = conv2d(Tensor([[[[2.0]]]]), Tensor([[[[1.0]]]]), Tensor([0.0]))
        assert out.data.tolist() == [[[[2.0]]]]

    def test_counting_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), 1, 1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, loop_conv2d(x, w, b, 1, 0), rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        B=st.integers(1, 2), C=st.integers(1, 3), O=st.integers(1, 3), H=st.integers(3, 7), W=st.integers(3, 7),
        k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 2), seed=st.integers(0, 10**6),
    )
    def test_loop_reference_property(self, B, C, O, H, W, k, stride, pad, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((B, C, H, W))
        w = rng.standard_normal((O, C, k, k))
        b = rng.standard_normal(O)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        assert got.shape[2] == (H + 2 * pad - k) // stride + 1
        np.testing.assert_allclose(got.data, loop_conv2d(x, w, b, stride, pad), rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((1, 1, 0, 3)))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
    def test_gradients(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        errs = check_gradients(lambda x, w, b: weighted_sum(conv2d(x, w, b, stride, pad)),
                               [rng.standard_normal((2, 2, 6, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)])
        assert max(errs) < 1e-5


class TestChannelPools:
    channels = np.array([[[[1, 2], [3, 4]], [[5, 6], [7, 8]]]], dtype=float)

    def test_avg(self):
        assert channel_avg_pool(Tensor(self.channels)).data[0, 0].tolist() == [[3, 4], [5, 6]]

    def test_max(self):
        assert channel_max_pool(Tensor(self.channels)).data[0, 0].tolist() == [[5, 6], [7, 8]]

    def test_single_channel_identity(self):
        x = np.random.default_rng(1).standard_normal((2, 1, 3, 3))
        assert np.array_equal(channel_avg_pool(Tensor(x)).data, x)
        assert np.array_equal(channel_max_pool(Tensor(x)).data, x)

    def test_loop_oracles(self):
        x = np.random.default_rng(2).standard_normal((1, 7, 4, 4))
        avg = channel_avg_pool(Tensor(x)).data
        mx = channel_max_pool(Tensor(x)).data
        for h in range(4):
            for w in range(4):
                assert abs(avg[0, 0, h, w] - sum(x[0, c, h, w] for c in range(7)) / 7) < 1e-12
                assert mx[0, 0, h, w] == max(x[0, c, h, w] for c in range(7))

    def test_max_tie_goes_to_channel_zero(self):
        x = Tensor(np.full((1, 3, 2, 2), 1.5), requires_grad=True)
        with Tape():
            loss = reduce_sum(channel_max_pool(x))
        backward(loss)
        assert np.array_equal(x.grad[0, 0], np.ones((2, 2)))
        assert not x.grad[0, 1:].any()

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 3, 3))
        assert check_gradients(lambda t: weighted_sum(channel_avg_pool(t)), [x])[0] < 1e-5
        assert check_gradients(lambda t: weighted_sum(channel_max_pool(t)), [x])[0] < 1e-5


class TestConcat:
    def test_values(self):
        out = concat_channels(Tensor([[[[1.0]]]]), Tensor([[[[2.0]]]]))
        assert out.data.tolist() == [[[[1.0]], [[2.0]]]]

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 2))))

    def test_empty_channel_tensor_disallowed(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 0, 2, 2))))

    def test_gradient_of_sum_is_ones(self):
        a = Tensor(np.random.default_rng(0).standard_normal((2, 3, 2, 2)), requires_grad=True)
        b = Tensor(np.random.default_rng(1).standard_normal((2, 1, 2, 2)), requires_grad=True)
        with Tape():
            loss = reduce_sum(concat_channels(a, b))
        backward(loss)
        assert np.array_equal(a.grad, np.ones(a.shape))
        assert np.array_equal(b.grad, np.ones(b.shape))

    @settings(max_examples=30, deadline=None)
    @given(ca=st.integers(1, 4), cb=st.integers(1, 4), seed=st.integers(0, 1000))
    def test_split_recovers_inputs_bitwise(self, ca, cb, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, ca, 3, 2)), rng.standard_normal((2, cb, 3, 2))
        left, right = split_channels(concat_channels(Tensor(a), Tensor(b)), ca)
        assert np.array_equal(left.data, a) and np.array_equal(right.data, b)


class TestElementwise:
    def test_sigmoid_values(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5
        x = np.random.default_rng(0).standard_normal(1000) * 5
        np.testing.assert_allclose(sigmoid(Tensor(x)).data, 1 - sigmoid(Tensor(-x)).data, rtol=0, atol=1e-15)

    def test_sigmoid_extreme(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            v = sigmoid(Tensor([-1000.0, 1000.0, -700.0])).data
        assert 0 <= v[0] <= 1e-300 and v[1] == 1.0
        # direct evaluation of the stable branch exp(x)/(1+exp(x))
        assert v[2] == pytest.approx(math.exp(-700.0) / (1 + math.exp(-700.0)), rel=1e-12)

    def test_sigmoid_range(self):
        v = sigmoid(Tensor(np.linspace(-30, 30, 101))).data
        assert np.all((v > 0) & (v < 1))

    def test_relu(self):
        assert relu(Tensor([-3.0, 3.0])).data.tolist() == [0.0, 3.0]

    def test_mul_broadcast_half(self):
        f = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        out = mul_broadcast(Tensor(f), Tensor(np.full((2, 1, 4, 4), 0.5))).data
        assert np.array_equal(out, 0.5 * f)

    def test_mul_broadcast_shape_check(self):
        with pytest.raises(ShapeError):
            mul_broadcast(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 2, 4, 4))))

    def test_fully_connected_loop(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.standard_normal((4, 8)), rng.standard_normal((5, 8)), rng.standard_normal(5)
        got = fully_connected(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(4):
            for e in range(5):
                assert abs(got[i, e] - (b[e] + sum(x[i, d] * w[e, d] for d in range(8)))) < 1e-12

    def test_global_avg_pool(self):
        x = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
        np.testing.assert_array_equal(global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3)))

    @pytest.mark.parametrize("name", ["sigmoid", "relu", "mul_broadcast", "fully_connected", "global_avg_pool", "add", "concat"])
    def test_gradients(self, name):
        rng = np.random.default_rng(11)
        cases = {
            "sigmoid": (lambda x: weighted_sum(sigmoid(x)), [rng.standard_normal((2, 3, 4))]),
            "relu": (lambda x: weighted_sum(relu(x)), [rng.standard_normal((3, 5))]),
            "mul_broadcast": (lambda a, m: weighted_sum(mul_broadcast(a, m)),
                              [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 1, 4, 4))]),
            "fully_connected": (lambda x, w, b: weighted_sum(fully_connected(x, w, b)),
                                [rng.standard_normal((4, 8)), rng.standard_normal((5, 8)), rng.standard_normal(5)]),
            "global_avg_pool": (lambda x: weighted_sum(global_avg_pool(x)), [rng.standard_normal((2, 3, 4, 5))]),
            "add": (lambda a, b: weighted_sum(add(a, b)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
            "concat": (lambda a, b: weighted_sum(concat_channels(a, b)),
                       [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 1, 3, 3))]),
        }
        fn, arrays = cases[name]
        assert max(check_gradients(fn, arrays)) < 1e-5


class TestBatchNorm:
    def test_constant_input_gives_zeros(self):
        x = np.ones((2, 3, 2, 2)) * np.array([1.0, -2.0, 5.0])[None, :, None, None]
        out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState(3), train=True)
        assert np.array_equal(out.data, np.zeros_like(x))

    def test_eval_closed_form(self):
        st_ = BatchNormState(1)
        out = batch_norm(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor([2.0]), Tensor([1.0]), st_, train=False)
        assert out.data.item() == pytest.approx(2 * 3 / math.sqrt(1 + 1e-5) + 1, abs=1e-12)
        assert out.data.item() == pytest.approx(6.99997, abs=1e-5)

    def test_train_statistics(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, (8, 4, 5, 5))
        out = batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), BatchNormState(4), train=True).data
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
        assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-3)

    def test_running_stats_update(self):
        x = np.random.default_rng(1).normal(2.0, 3.0, (4, 2, 3, 3))
        st_ = BatchNormState(2)
        batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, train=True)
        n = 4 * 9
        np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))

    def test_single_value_statistics_rejected(self):
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState(2), train=True)

    @pytest.mark.parametrize("train", [True, False])
    def test_gradients(self, train):
        rng = np.random.default_rng(4)
        st_ = BatchNormState(3)
        st_.running_mean = rng.standard_normal(3)
        st_.running_var = rng.uniform(0.5, 2.0, 3)
        errs = check_gradients(lambda x, g, b: weighted_sum(batch_norm(x, g, b, st_, train)),
                               [rng.standard_normal((3, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)])
        assert max(errs) < 1e-5


class TestDropout:
    def test_p_zero_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        rng = np.random.default_rng(0)
        assert np.array_equal(dropout(Tensor(x), 0.0, True, rng).data, x)
        assert np.array_equal(dropout(Tensor(x), 0.0, False).data, x)

    def test_eval_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert np.array_equal(dropout(Tensor(x), 0.7, False).data, x)

    def test_law_of_large_numbers(self):
        out = dropout(Tensor(np.ones(10**6)), 0.5, True, np.random.default_rng(7)).data
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_seeded_masks_reproducible(self):
        x = Tensor(np.ones((50, 50)))
        a = dropout(x, 0.3, True, np.random.default_rng(3)).data
        b = dropout(x, 0.3, True, np.random.default_rng(3)).data
        assert np.array_equal(a, b)

    def test_gradient_uses_same_mask(self):
        x = np.random.default_rng(0).standard_normal((4, 6))
        errs = check_gradients(lambda t: weighted_sum(dropout(t, 0.4, True, np.random.default_rng(5))), [x])
        assert errs[0] < 1e-5


class TestBackward:
    def test_sum_of_double(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
        with Tape():
            loss = reduce_sum(scale(x, 2.0))
        backward(loss)
        assert np.array_equal(x.grad, np.full(x.shape, 2.0))

    def test_sigmoid_slope_at_zero(self):
        w = Tensor([0.0], requires_grad=True)
        x = Tensor([[1.0]])
        with Tape():
            loss = reduce_sum(sigmoid(fully_connected(x, w_as_matrix(w), Tensor([0.0]))))
        backward(loss)
        assert w.grad[0] == 0.25

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = scale(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            backward(y)

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = reduce_sum(scale(x, 1.0))
        backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            backward(loss)

    def test_loss_without_tape_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(TapeError):
            backward(reduce_sum(x))

    def test_shared_input_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = reduce_sum(add(relu(x), scale(x, 3.0)))
        backward(loss)
        assert x.grad.tolist() == [4.0, 4.0]


def w_as_matrix(w: Tensor) -> Tensor:
    from ftfd.tensor import _result

    return _result(w.data.reshape(1, 1), (w,), lambda g: (g.reshape(1),))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((2, 3, 4)), "bias": rng.standard_normal(5), "name with ü": np.array([np.pi])}
    path = tmp_path / "p.ftfd"
    checkpoint.save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"FTFD"
    back = checkpoint.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    checkpoint.save_tensors(tmp_path / "q.ftfd", back)
    assert (tmp_path / "q.ftfd").read_bytes() == raw


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_tensors(path)
