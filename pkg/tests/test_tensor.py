import numpy as np
import pytest

from eyolo.tensor import (
    ConvParams,
    DimensionError,
    GraphStateError,
    NonFiniteError,
    Tensor,
    activation,
    conv2d,
    leaky_relu,
    merge,
    sigmoid,
    split_channels,
    upsample_nearest_2x,
)
from oracles import finite_difference, max_rel_error


def brute_conv(x, w, b, stride):
    """Direct nested-loop cross-correlation with zero same-padding."""
    bsz, cin, H, W = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    ho, wo = H // stride, W // stride
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = b[o]
                    for ci in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                y, xx = r * stride + di - p, c * stride + dj - p
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += w[o, ci, di, dj] * x[n, ci, y, xx]
                    out[n, o, r, c] = acc
    return out


def conv(x, w, b=None, stride=1):
    b = np.zeros(w.shape[0]) if b is None else b
    return conv2d(Tensor(x), ConvParams(Tensor(w), Tensor(b), stride=stride))


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(conv(x, w).data, x)

    def test_all_ones_kernel_border_counts(self):
        out = conv(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3))).data[0, 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == out[0, 4] == out[4, 0] == out[4, 4] == 4.0
        assert out[0, 2] == 6.0

    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2)])
    def test_matches_direct_summation(self, rng, k, stride):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        np.testing.assert_allclose(conv(x, w, b, stride).data, brute_conv(x, w, b, stride), rtol=1e-12, atol=1e-12)

    def test_stride2_shape_full_input(self):
        x = Tensor(np.zeros((1, 4, 416, 416)))
        out = conv2d(x, ConvParams(np.zeros((32, 4, 3, 3)), np.zeros(32), stride=2))
        assert out.shape == (1, 32, 208, 208)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3, 4, 4\).*\(2, 4, 3, 3\)"):
            conv(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 3, 3)))

    def test_stride_must_divide(self):
        with pytest.raises(DimensionError):
            conv(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 3, 3)), stride=2)

    @pytest.mark.parametrize("shape,stride", [((1, 1, 5, 5), 1), ((1, 1, 1, 1), 2), ((1, 1, 3, 1), 1)])
    def test_kernel_constraints(self, shape, stride):
        with pytest.raises(DimensionError):
            ConvParams(np.zeros(shape), np.zeros(1), stride=stride)

    def test_linearity(self, rng):
        x, y = rng.normal(size=(2, 1, 3, 8, 8))
        w = rng.normal(size=(5, 3, 3, 3))
        a, b = 0.7, -1.3
        lhs = conv(a * x + b * y, w).data
        rhs = a * conv(x, w).data + b * conv(y, w).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)

    def test_deterministic(self, rng):
        x = rng.normal(size=(1, 4, 16, 16))
        w = rng.normal(size=(8, 4, 3, 3))
        assert np.array_equal(conv(x, w, stride=2).data, conv(x, w, stride=2).data)


class TestActivations:
    def test_leaky_relu_negative(self):
        assert leaky_relu(Tensor([-1.0])).data[0] == pytest.approx(-0.1)

    def test_leaky_relu_positive_identity(self):
        assert leaky_relu(Tensor([2.5])).data[0] == 2.5

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_symmetry(self, rng):
        x = rng.uniform(-30, 30, size=1000)
        np.testing.assert_allclose(sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data, 1.0, atol=1e-15)

    def test_dispatch(self):
        assert activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
        with pytest.raises(ValueError):
            activation(Tensor([0.0]), "tanh")


class TestUpsample:
    def test_replicates_value(self):
        out = upsample_nearest_2x(Tensor(np.full((1, 1, 1, 1), 7.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))

    def test_head_shape(self):
        assert upsample_nearest_2x(Tensor(np.zeros((1, 256, 13, 13)))).shape == (1, 256, 26, 26)

    def test_mean_pool_inverts(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        up = upsample_nearest_2x(Tensor(x)).data
        np.testing.assert_allclose(up.reshape(2, 3, 5, 2, 4, 2).mean(axis=(3, 5)), x, atol=0)


class TestMerge:
    def test_concat_shape(self):
        out = merge(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))), "concat_channels")
        assert out.shape == (1, 5, 4, 4)

    def test_add_zero(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        np.testing.assert_array_equal(merge(Tensor(x), Tensor(np.zeros_like(x)), "add").data, x)

    def test_concat_split_round_trip(self, rng):
        a, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4))
        left, right = split_channels(merge(Tensor(a), Tensor(b)), 2)
        np.testing.assert_array_equal(left.data, a)
        np.testing.assert_array_equal(right.data, b)

    @pytest.mark.parametrize("mode,b_shape", [("concat_channels", (1, 2, 3, 4)), ("add", (1, 3, 4, 4))])
    def test_shape_mismatch(self, mode, b_shape):
        with pytest.raises(DimensionError):
            merge(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros(b_shape)), mode)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4, 5)))

    def test_power_rule(self):
        x = Tensor([3.0], requires_grad=True)
        (x**2).sum().backward()
        assert x.grad[0] == 6.0

    def test_second_backward_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphStateError):
            loss.backward()

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        assert x.grad[0] == 8.0

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([0.0]) ** -1.0


def _gradcheck(build, *arrays, tol=1e-4):
    """Compare tape gradients of sum(build(...) * R) with central differences."""
    rng = np.random.default_rng(99)
    probe = build(*[Tensor(a) for a in arrays])
    weights = rng.normal(size=probe.shape)

    def scalar():
        return float((build(*[Tensor(a) for a in arrays]).data * weights).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    (build(*leaves) * weights).sum().backward()
    for leaf, arr in zip(leaves, arrays):
        numeric = finite_difference(scalar, arr, eps=1e-5)
        assert max_rel_error(leaf.grad, numeric) < tol


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2)])
def test_gradcheck_conv(rng, k, stride):
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(2, 3, k, k))
    b = rng.normal(size=2)
    _gradcheck(lambda x, w, b: conv2d(x, ConvParams(w, b, stride=stride)), x, w, b)


@pytest.mark.parametrize(
    "name,build,nargs",
    [
        ("leaky_relu", lambda a: leaky_relu(a), 1),
        ("sigmoid", lambda a: sigmoid(a), 1),
        ("upsample", lambda a: upsample_nearest_2x(a), 1),
        ("concat", lambda a, b: merge(a, b), 2),
        ("add", lambda a, b: merge(a, b, "add"), 2),
        ("mul", lambda a, b: a * b, 2),
        ("sub", lambda a, b: a - b, 2),
        ("pow", lambda a: a**2, 1),
        ("getitem", lambda a: a[:, 1:, ::2], 1),
        ("transpose", lambda a: a.transpose(0, 3, 1, 2), 1),
        ("reshape", lambda a: a.reshape(2, -1), 1),
        ("broadcast_add", lambda a: a + np.arange(3.0), 1),
    ],
)
def test_gradcheck_ops(rng, name, build, nargs):
    arrays = [_away_from_zero(rng, (2, 2, 3, 3)) for _ in range(nargs)]
    if name == "broadcast_add":
        arrays = [_away_from_zero(rng, (2, 2, 3, 1))]
    _gradcheck(build, *arrays)


def test_gradcheck_composed_graph(rng):
    x = rng.uniform(0, 1, size=(1, 2, 4, 4))
    w1 = rng.normal(size=(4, 2, 3, 3)) * 0.5
    w2 = rng.normal(size=(3, 6, 1, 1)) * 0.5
    b1, b2 = rng.normal(size=4), rng.normal(size=3)

    def build(x, w1, b1, w2, b2):
        h = leaky_relu(conv2d(x, ConvParams(w1, b1, stride=2)))
        u = upsample_nearest_2x(h)
        cat = merge(u, x)
        return sigmoid(conv2d(cat, ConvParams(w2, b2)))

    _gradcheck(build, x, w1, b1, w2, b2)
