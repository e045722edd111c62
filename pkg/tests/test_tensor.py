"""Tensor library: op semantics, gradient fidelity, Adam, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainqa import tensor as T
from chainqa.errors import ConfigurationError, DimensionError, NumericError, StateError

# Frozen from a 50-digit mpmath evaluation of exp(k)/sum(exp([1,2,3])).
SOFTMAX_123 = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]


def t(data, grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestLinear:
    def test_identity_map(self):
        y = T.linear(t([[1.0, 0.0]]), t(np.eye(2)), t([0.0, 0.0]))
        assert np.allclose(y.data, [[1.0, 0.0]])

    def test_zero_weights_pass_bias(self):
        y = T.linear(t([[2.0, 3.0]]), t(np.zeros((2, 1))), t([5.0]))
        assert np.allclose(y.data, [[5.0]])

    def test_hand_arithmetic(self):
        y = T.linear(t([[1.0, 2.0]]), t([[1.0], [1.0]]), t([0.5]))
        assert np.allclose(y.data, [[3.5]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            T.linear(t([[1.0, 2.0, 3.0]]), t(np.zeros((2, 1))), t([0.0]))
        assert "(1, 3)" in str(err.value) and "(2, 1)" in str(err.value)

    def test_gradient_flow(self):
        x, w, b = t([[1.0, 2.0]], grad=True), t([[1.0], [1.0]], grad=True), t([0.5], grad=True)
        T.backward(T.tensor_sum(T.linear(x, w, b)))
        assert np.allclose(x.grad, [[1.0, 1.0]])
        assert np.allclose(w.grad, [[1.0], [2.0]])
        assert np.allclose(b.grad, [1.0])


class TestSoftmax:
    def test_uniform_input(self):
        y = T.softmax(t([0.0, 0.0, 0.0]))
        assert np.allclose(y.data, [1 / 3] * 3)

    def test_singleton(self):
        assert np.allclose(T.softmax(t([7.0])).data, [1.0])

    def test_reference_values(self):
        y = T.softmax(t([1.0, 2.0, 3.0]))
        assert np.allclose(y.data, SOFTMAX_123, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax(t(np.zeros(0)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12),
           st.floats(min_value=-30, max_value=30))
    def test_sums_to_one_and_shift_invariant(self, values, shift):
        base = T.softmax(t(values)).data
        assert abs(base.sum() - 1.0) < 1e-9
        assert np.all(base >= 0)
        shifted = T.softmax(t([v + shift for v in values])).data
        assert np.max(np.abs(base - shifted)) < 1e-12

    def test_argmax_preserved(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.normal(size=rng.integers(1, 20))
            assert np.argmax(T.softmax(t(v)).data) == np.argmax(v)


class TestAttention:
    def test_single_key_returns_value_row(self):
        q = t(np.random.default_rng(0).normal(size=(3, 4)))
        k = t([[0.3, -1.0, 2.0, 0.1]])
        v = t([[5.0, 6.0, 7.0, 8.0]])
        y = T.attention(q, k, v, heads=2)
        assert np.allclose(y.data, np.tile(v.data, (3, 1)))

    def test_identical_keys_average_values(self):
        k = t(np.ones((4, 2)))
        v = t(np.arange(8.0).reshape(4, 2))
        y = T.attention(t([[0.5, -0.5]]), k, v, heads=1)
        assert np.allclose(y.data, v.data.mean(axis=0))

    def test_hand_case_matches_formula(self):
        # Q=[[0]], K=[[1],[-1]], V=[[10],[20]]: logits [0,0] -> weights .5/.5
        y = T.attention(t([[0.0]]), t([[1.0], [-1.0]]), t([[10.0], [20.0]]), heads=1)
        assert np.allclose(y.data, [[15.0]])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        for heads in (1, 2, 4):
            m, n, dk, dv = 3, 5, 8, 4
            q, k, v = rng.normal(size=(m, dk)), rng.normal(size=(n, dk)), rng.normal(size=(n, dv))
            got = T.attention(t(q), t(k), t(v), heads=heads).data
            dk_h, dv_h = dk // heads, dv // heads
            expect = np.zeros((m, dv))
            for h in range(heads):
                qs, ks, vs = q[:, h * dk_h:(h + 1) * dk_h], k[:, h * dk_h:(h + 1) * dk_h], v[:, h * dv_h:(h + 1) * dv_h]
                logits = qs @ ks.T / np.sqrt(dk_h)
                w = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
                expect[:, h * dv_h:(h + 1) * dv_h] = w @ vs
            assert np.allclose(got, expect, atol=1e-12)

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            heads = int(rng.choice([1, 2]))
            n = int(rng.integers(1, 6))
            q = rng.normal(size=(4, 4))
            k = rng.normal(size=(n, 4))
            v = rng.normal(size=(n, 4))
            y = T.attention(t(q), t(k), t(v), heads=heads).data
            dv_h = 4 // heads
            for h in range(heads):
                vs = v[:, h * dv_h:(h + 1) * dv_h]
                ys = y[:, h * dv_h:(h + 1) * dv_h]
                assert np.all(ys <= vs.max(axis=0) + 1e-12)
                assert np.all(ys >= vs.min(axis=0) - 1e-12)

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigurationError):
            T.attention(t(np.zeros((1, 3))), t(np.zeros((2, 3))), t(np.zeros((2, 3))), heads=2)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        q = T.Parameter("q", rng.normal(size=(3, 4)))
        k = T.Parameter("k", rng.normal(size=(5, 4)))
        v = T.Parameter("v", rng.normal(size=(5, 4)))
        target = rng.normal(size=(3, 4))

        def loss():
            y = T.attention(q.tensor, k.tensor, v.tensor, heads=2)
            d = T.sub(y, T.Tensor(target))
            return T.tensor_sum(T.mul(d, d))

        assert T.gradient_check(loss, [q, k, v], eps=1e-5) < 1e-5


class TestGradients:
    def test_sum_gradient_is_ones(self):
        p = T.Parameter("x", np.random.default_rng(0).normal(size=(4, 3)))
        err = T.gradient_check(lambda: T.tensor_sum(p.tensor), [p], eps=1e-5)
        assert err < 1e-9

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = T.Parameter("logits", rng.normal(size=12))

        def loss():
            return -T.pick(T.log_softmax(logits.tensor), 4)

        assert T.gradient_check(loss, [logits], eps=1e-5) < 1e-5

    @pytest.mark.parametrize("op_name", ["add", "sub", "mul", "matmul", "tanh", "softmax",
                                         "log_softmax", "layer_norm", "take", "concat",
                                         "mean", "col", "row_slice"])
    def test_primitive_against_central_differences(self, op_name):
        rng = np.random.default_rng(hash(op_name) % 2**31)
        a = T.Parameter("a", rng.normal(size=(4, 6)))
        b = T.Parameter("b", rng.normal(size=(4, 6)))
        w = T.Parameter("w", rng.normal(size=(6, 3)))
        gain = T.Parameter("g", 1.0 + 0.1 * rng.normal(size=6))
        bias = T.Parameter("bb", rng.normal(size=6))
        mix = T.Tensor(rng.normal(size=(4, 6)))

        def build():
            if op_name == "add":
                return T.add(a.tensor, b.tensor)
            if op_name == "sub":
                return T.sub(a.tensor, b.tensor)
            if op_name == "mul":
                return T.mul(a.tensor, b.tensor)
            if op_name == "matmul":
                return T.matmul(a.tensor, w.tensor)
            if op_name == "tanh":
                return T.tanh(a.tensor)
            if op_name == "softmax":
                return T.mul(T.softmax(a.tensor), mix)
            if op_name == "log_softmax":
                return T.mul(T.log_softmax(a.tensor), mix)
            if op_name == "layer_norm":
                return T.layer_norm(a.tensor, gain.tensor, bias.tensor)
            if op_name == "take":
                return T.take(a.tensor, [2, 0, 2, 3])
            if op_name == "concat":
                return T.concat([a.tensor, b.tensor], axis=1)
            if op_name == "mean":
                return T.mean(a.tensor)
            if op_name == "col":
                return T.col(a.tensor, 1)
            if op_name == "row_slice":
                return T.row_slice(a.tensor, 1, 3)
            raise AssertionError(op_name)

        def loss():
            out = build()
            if out.data.ndim == 0:
                return out
            return T.tensor_sum(T.tanh(out))

        params = [a, b, w, gain, bias]
        assert T.gradient_check(loss, params, eps=1e-5) < 1e-5

    def test_bit_identical_repeated_forward(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 8))
        w = rng.normal(size=(8, 8))
        runs = []
        for _ in range(2):
            y = T.attention(T.matmul(t(x), t(w)), t(x), t(x), heads=2)
            runs.append(T.softmax(y).data.tobytes())
        assert runs[0] == runs[1]

    def test_nan_raises_immediately(self):
        with pytest.raises(NumericError):
            t([np.nan])
        with pytest.raises(NumericError):
            t([[1.0, np.inf]])


class TestAdam:
    def _param(self, values):
        return T.Parameter("p", np.asarray(values, dtype=np.float64))

    def test_zero_grad_no_decay_leaves_parameter(self):
        p = self._param([1.0, -2.0])
        p.tensor.grad = np.zeros(2)
        T.adam_step([p], lr=0.1, weight_decay=0.0)
        assert np.allclose(p.data, [1.0, -2.0])

    def test_first_step_magnitude_near_lr(self):
        p = self._param([0.5, -0.25, 3.0])
        p.tensor.grad = np.array([0.3, -4.0, 1e-2])
        before = p.data.copy()
        T.adam_step([p], lr=1e-3, weight_decay=0.0)
        step = before - p.data
        # bias correction makes m_hat/sqrt(v_hat) ~= sign(g) on step one
        assert np.allclose(np.abs(step), 1e-3, rtol=1e-4)
        assert np.all(np.sign(step) == np.sign([0.3, -4.0, 1e-2]))

    def test_decay_only_step_scales_parameter(self):
        p = self._param([2.0, -2.0])
        p.tensor.grad = np.zeros(2)
        T.adam_step([p], lr=0.01, weight_decay=0.1)
        assert np.allclose(p.data, np.array([2.0, -2.0]) * (1 - 0.01 * 0.1))

    def test_missing_gradient_names_parameter(self):
        p = T.Parameter("encoder/block0/w", np.zeros(3))
        with pytest.raises(StateError) as err:
            T.adam_step([p], lr=0.1)
        assert "encoder/block0/w" in str(err.value)

    def test_gradients_cleared_after_step(self):
        p = self._param([1.0])
        p.tensor.grad = np.ones(1)
        T.adam_step([p], lr=0.1)
        assert p.tensor.grad is None


class TestCheckpoint:
    def test_roundtrip_and_byte_identity(self, tmp_path):
        rng = np.random.default_rng(2)
        params = [T.Parameter("b/two", rng.normal(size=(3, 2))),
                  T.Parameter("a/one", rng.normal(size=5))]
        p1, p2 = tmp_path / "x.ckpt", tmp_path / "y.ckpt"
        T.save_checkpoint(str(p1), params, seed=42, meta={"kind": "test"})
        T.save_checkpoint(str(p2), params, seed=42, meta={"kind": "test"})
        assert p1.read_bytes() == p2.read_bytes()
        arrays, header = T.load_checkpoint(str(p1))
        assert header["seed"] == 42 and header["version"] == 1
        assert set(arrays) == {"a/one", "b/two"}
        for p in params:
            assert np.array_equal(arrays[p.name], p.data)

    def test_bad_magic_rejected(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE1234")
        with pytest.raises(StateError):
            T.load_checkpoint(str(bad))
