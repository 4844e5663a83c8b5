import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusiondepth import ops
from fusiondepth.autograd import (
    ComputationRecord,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    precision,
)
from fusiondepth.gradcheck import gradcheck
from fusiondepth.optim import Adam, AdamState, adam_step

from oracles import conv_oracle, scatter_oracle


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- matmul ------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        np.testing.assert_array_equal(ops.matmul(np.eye(2), m).data, m)

    def test_hand_evaluated(self):
        out = ops.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradients(self, rng):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        errs = gradcheck(lambda: ops.sum(ops.matmul(a, b) ** 2), [a, b])
        assert max(errs.values()) < 1e-6

    def test_batched_gradients(self, rng):
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 2)))
        errs = gradcheck(lambda: ops.sum(ops.sigmoid(ops.matmul(a, b))), [a, b])
        assert max(errs.values()) < 1e-6


# -- convolution ----------------------------------------------------------------------

class TestConv2d:
    def test_identity_kernel(self):
        out = ops.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out.data, np.ones((1, 3, 3)))

    def test_block_means(self, rng):
        x = rng.normal(size=(1, 4, 4))
        k = np.full((1, 1, 2, 2), 0.25)
        out = ops.conv2d(x, k, stride=2)
        np.testing.assert_allclose(out.data, conv_oracle(x, k, 2, 0), atol=1e-12)
        means = x[0].reshape(2, 2, 2, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(out.data[0], means, atol=1e-12)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="larger than padded input"):
            ops.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_sliding_window_oracle(self, rng, stride, pad):
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        out = ops.conv2d(x, k, stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, conv_oracle(x, k, stride, pad), atol=1e-12)

    def test_output_size_formula(self, rng):
        out = ops.conv2d(rng.normal(size=(2, 2, 9, 8)), rng.normal(size=(4, 2, 3, 2)), stride=2, padding=1)
        assert out.shape == (2, 4, (9 + 2 - 3) // 2 + 1, (8 + 2 - 2) // 2 + 1)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_gradients(self, rng, stride, pad):
        x = leaf(rng.normal(size=(2, 2, 6, 6)))
        k = leaf(rng.normal(size=(3, 2, 3, 3)))
        w = rng.normal(size=ops.conv2d(x, k, stride, pad).shape)
        errs = gradcheck(lambda: ops.sum(ops.conv2d(x, k, stride, pad) * w), [x, k])
        assert max(errs.values()) < 1e-6


class TestTransposeConv2d:
    def test_single_pixel_scatters_kernel(self, rng):
        k = rng.normal(size=(1, 1, 2, 2))
        out = ops.transpose_conv2d(np.full((1, 1, 1), 3.0), k, stride=2)
        np.testing.assert_allclose(out.data, 3.0 * k[0], atol=1e-15)

    def test_tiles(self, rng):
        x = rng.normal(size=(1, 2, 2))
        out = ops.transpose_conv2d(x, np.ones((1, 1, 2, 2)), stride=2)
        assert out.shape == (1, 4, 4)
        np.testing.assert_allclose(out.data, scatter_oracle(x, np.ones((1, 1, 2, 2)), 2), atol=1e-15)
        np.testing.assert_allclose(out.data[0], np.kron(x[0], np.ones((2, 2))), atol=1e-15)

    @pytest.mark.parametrize("stride,kh", [(1, 3), (2, 2), (2, 3), (3, 2)])
    def test_matches_scatter_oracle(self, rng, stride, kh):
        x = rng.normal(size=(3, 4, 3))
        k = rng.normal(size=(3, 2, kh, kh))
        out = ops.transpose_conv2d(x, k, stride=stride)
        np.testing.assert_allclose(out.data, scatter_oracle(x, k, stride), atol=1e-12)

    def test_adjoint_random_5x5(self, rng):
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        cx = ops.conv2d(x, k, stride=2).data
        y = rng.normal(size=cx.shape)
        lhs = float(np.sum(cx * y))
        rhs = float(np.sum(x * ops.transpose_conv2d(y, k, stride=2).data))
        assert abs(lhs - rhs) < 1e-9

    def test_gradients(self, rng):
        x = leaf(rng.normal(size=(2, 3, 3, 4)))
        k = leaf(rng.normal(size=(3, 2, 2, 2)))
        w = rng.normal(size=(2, 2, 6, 8))
        errs = gradcheck(lambda: ops.sum(ops.transpose_conv2d(x, k, 2) * w), [x, k])
        assert max(errs.values()) < 1e-6


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    k=st.integers(1, 3),
    stride=st.integers(1, 3),
    n=st.integers(0, 3),
)
def test_conv_adjoint_identity(seed, c_in, c_out, k, stride, n):
    # sizes chosen so transpose_conv2d inverts the output geometry exactly
    side = n * stride + k
    r = np.random.default_rng(seed)
    x = r.normal(size=(c_in, side, side))
    kern = r.normal(size=(c_out, c_in, k, k))
    cx = ops.conv2d(x, kern, stride=stride).data
    if (cx.shape[1] - 1) * stride + k != side:
        return
    y = r.normal(size=cx.shape)
    lhs = np.sum(cx * y)
    rhs = np.sum(x * ops.transpose_conv2d(y, kern, stride=stride).data)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


# -- relu / softmax / batch norm ----------------------------------------------------------

class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(ops.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_nonnegative_unchanged(self, rng):
        x = np.abs(rng.normal(size=10))
        np.testing.assert_array_equal(ops.relu(x).data, x)

    def test_gradient(self):
        x = leaf([-1.0, 2.0])
        backward(ops.sum(ops.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])
        errs = gradcheck(lambda: ops.sum(ops.relu(x)), [x])
        assert errs[0] < 1e-6

    def test_subgradient_at_zero(self):
        x = leaf([0.0])
        backward(ops.sum(ops.relu(x)))
        assert x.grad[0] == 0.0


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_allclose(ops.softmax([1000.0, 0.0]).data, [1.0, 0.0], atol=1e-15)

    def test_log_weights(self):
        out = ops.softmax([math.log(1), math.log(2), math.log(3)]).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    @pytest.mark.parametrize("axis", [0, 1, -1])
    def test_rows_sum_to_one(self, rng, axis):
        y = ops.softmax(rng.normal(scale=5, size=(4, 5, 3)), axis=axis).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)

    def test_gradient(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        w = rng.normal(size=(3, 4))
        errs = gradcheck(lambda: ops.sum(ops.softmax(x, axis=0) * w), [x])
        assert errs[0] < 1e-6

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            ops.softmax(np.zeros((2, 2)), axis=2)


class TestBatchNorm:
    def test_constant_channel_gives_zeros(self):
        out = ops.batch_norm(np.full((2, 1, 3, 3), 4.0), np.ones(1), np.zeros(1), eps=1e-5)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_hand_case(self):
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        out = ops.batch_norm(x, [2.0], [1.0], eps=0.0)
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 3.0], atol=1e-15)

    def test_normalises_each_channel(self, rng):
        x = rng.normal(loc=3.0, scale=2.5, size=(4, 3, 5, 5))
        eps = 1e-5
        y = ops.batch_norm(x, np.ones(3), np.zeros(3), eps=eps).data
        mu = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        assert np.abs(mu).max() < 1e-9
        assert np.abs(var - 1).max() < eps

    def test_eval_mode_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        out = ops.batch_norm(x, [1.0, 2.0], [0.0, 1.0], eps=0.0, training=False,
                             running_mean=np.array([1.0, -1.0]), running_var=np.array([4.0, 1.0]))
        expect = np.stack([(x[:, 0] - 1) / 2, 2 * (x[:, 1] + 1) + 1], axis=1)
        np.testing.assert_allclose(out.data, expect, atol=1e-14)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = leaf(rng.normal(size=(3, 2, 3, 2)))
        g, b = leaf(rng.normal(size=2)), leaf(rng.normal(size=2))
        w = rng.normal(size=x.shape)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)

        def f():
            return ops.sum(ops.batch_norm(x, g, b, eps=1e-5, training=training,
                                          running_mean=rm, running_var=rv) * w)

        errs = gradcheck(f, [x, g, b])
        assert max(errs.values()) < 1e-6


# -- remaining primitives -------------------------------------------------------------------

@pytest.mark.parametrize(
    "name,fn,make",
    [
        ("add", lambda a, b: ops.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
        ("sub", lambda a, b: ops.sub(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        ("mul", lambda a, b: ops.mul(a, b), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
        ("div", lambda a, b: ops.div(a, b), lambda r: [r.normal(size=(2, 3)), r.uniform(1, 2, size=(2, 3))]),
        ("neg", lambda a: ops.neg(a), lambda r: [r.normal(size=5)]),
        ("power", lambda a: ops.power(a, 3.0), lambda r: [r.normal(size=5)]),
        ("sqrt", lambda a: ops.sqrt(a), lambda r: [r.uniform(0.5, 2, size=5)]),
        ("exp", lambda a: ops.exp(a), lambda r: [r.normal(size=5)]),
        ("log", lambda a: ops.log(a), lambda r: [r.uniform(0.5, 2, size=5)]),
        ("sigmoid", lambda a: ops.sigmoid(a), lambda r: [r.normal(scale=3, size=6)]),
        ("sum_axis", lambda a: ops.sum(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
        ("mean_axes", lambda a: ops.mean(a, axis=(0, 2), keepdims=True), lambda r: [r.normal(size=(2, 3, 4))]),
        ("reshape", lambda a: ops.reshape(a, (6, 2)), lambda r: [r.normal(size=(3, 4))]),
        ("transpose", lambda a: ops.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))]),
        ("layer_norm", lambda a, g, b: ops.layer_norm(a, g, b),
         lambda r: [r.normal(size=(3, 5)), r.normal(size=5), r.normal(size=5)]),
    ],
)
def test_primitive_gradients(rng, name, fn, make):
    inputs = [leaf(a) for a in make(rng)]
    w = rng.normal(size=fn(*inputs).shape)
    errs = gradcheck(lambda: ops.sum(fn(*inputs) * w), inputs)
    assert max(errs.values()) < 1e-6, name


# -- backward ----------------------------------------------------------------------------------

class TestBackward:
    def test_sum(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square(self):
        x = leaf([1.0, 2.0])
        backward(ops.sum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_composite_graph(self, rng):
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(4, 2)))
        c = leaf(rng.normal(size=(2,)))

        def f():
            h = ops.relu(ops.matmul(a, b) + c)
            s = ops.softmax(h * h, axis=0)
            return ops.sum(ops.log(s + 1.0) * ops.sigmoid(h)) + ops.mean(a * a)

        errs = gradcheck(f, [a, b, c])
        assert max(errs.values()) < 1e-6

    def test_unused_leaf_gets_zero_grad(self):
        x, y = leaf([1.0, 2.0]), leaf([5.0])
        y.grad = np.array([7.0])
        backward(ops.sum(x), leaves=[x, y])
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_gradients_overwrite(self):
        x = leaf([1.0, 2.0])
        backward(ops.sum(x * 3.0))
        backward(ops.sum(x * 3.0))
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_non_scalar_loss(self):
        with pytest.raises(ShapeError, match="scalar"):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_reused_node_accumulates(self):
        x = leaf([3.0])
        y = x * x
        backward(ops.sum(y + y))
        np.testing.assert_allclose(x.grad, [12.0])


class TestComputationRecord:
    def test_topological_and_unique(self, rng):
        a = leaf(rng.normal(size=(2, 2)))
        h = ops.relu(a)
        loss = ops.sum(h * h + h)
        rec = ComputationRecord.trace(loss)
        ids = [id(t) for t in rec.nodes]
        assert len(ids) == len(set(ids))
        position = {i: n for n, i in enumerate(ids)}
        for _, inputs, out in rec.entries():
            for i in inputs:
                if i in position:
                    assert position[i] < position[out]
        assert rec.nodes[-1] is loss
        assert rec.leaves == [a]

    def test_replay_is_bit_identical(self, rng):
        a = leaf(rng.normal(size=(2, 3, 6, 6)))
        k = leaf(rng.normal(size=(4, 3, 3, 3)))
        y = ops.softmax(ops.conv2d(a, k, 2, 1), axis=1)
        rec = ComputationRecord.trace(ops.sum(y * y))
        assert rec.replay()


class TestPurityAndErrors:
    def test_inputs_not_mutated(self, rng):
        arrays = [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)]
        copies = [a.copy() for a in arrays]
        x, k, g = (leaf(a) for a in arrays)
        out = ops.batch_norm(ops.conv2d(x, k, 1, 1), g, g)
        out = ops.transpose_conv2d(ops.softmax(out, axis=1), np.ones((2, 1, 2, 2)), 2)
        backward(ops.sum(ops.relu(out)))
        for a, c in zip(arrays, copies):
            np.testing.assert_array_equal(a, c)

    def test_non_finite_is_error(self):
        with pytest.raises(NonFiniteError):
            ops.log([0.0])
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert y.is_leaf and not y.requires_grad

    def test_float32_precision(self):
        with precision("float32"):
            t = Tensor([1.0, 2.0])
            assert t.data.dtype == np.float32
            assert ops.relu(t).data.dtype == np.float32


# -- adam ------------------------------------------------------------------------------------

class TestAdam:
    def test_zero_gradient_fixed_point(self, rng):
        p = {"w": rng.normal(size=(3, 3))}
        new, _ = adam_step(p, {"w": np.zeros((3, 3))}, AdamState(), lr=1e-3)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_is_lr(self):
        new, state = adam_step({"x": np.array([0.5])}, {"x": np.array([1.0])}, AdamState(), lr=1e-4, t=1)
        # m_hat = 1, v_hat = 1 after bias correction -> step = lr / (1 + eps)
        step = new["x"][0] - 0.5
        assert step == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-9)
        assert state.t == 1

    def test_closed_form_second_step(self):
        p, s = adam_step({"x": np.array([0.0])}, {"x": np.array([1.0])}, AdamState(), lr=0.1)
        p, s = adam_step(p, {"x": np.array([-1.0])}, s, lr=0.1)
        m = 0.9 * 0.1 - 0.1
        v = 0.999 * 0.001 + 0.001
        expect = -0.1 / (1 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert p["x"][0] == pytest.approx(expect, rel=1e-12)

    def test_deterministic(self, rng):
        p = {"a": rng.normal(size=(4,)), "b": rng.normal(size=(2, 2))}
        gs = [{k: rng.normal(size=v.shape) for k, v in p.items()} for _ in range(5)]

        def run():
            params, state = dict(p), AdamState()
            for g in gs:
                params, state = adam_step(params, g, state, lr=1e-2)
            return params

        r1, r2 = run(), run()
        for k in p:
            assert r1[k].tobytes() == r2[k].tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState(), lr=1e-3)

    def test_bad_step_index(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, AdamState(), lr=1e-3, t=0)

    def test_wrapper_minimises_quadratic(self):
        w = leaf([3.0, -2.0])
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(300):
            backward(ops.sum(w * w))
            opt.step()
        assert np.abs(w.data).max() < 0.05
