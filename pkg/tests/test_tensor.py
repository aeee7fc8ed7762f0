import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from basinlab import tensor as tc
from basinlab.errors import DimensionError, DomainError, NonFiniteError, UsageError
from basinlab.tensor import Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_unit_pick(self):
        out = tc.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        out = tc.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_both_sides(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True, dtype=np.float64)
        tc.matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


class TestActivations:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(tc.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_relu(self):
        np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_layer_norm_closed_form(self):
        out = tc.layer_norm(Tensor([[1.0, 3.0]], dtype=np.float64))
        # mean 2, variance 1 -> (x - 2) / sqrt(1 + eps)
        expected = np.array([[-1.0, 1.0]]) / math.sqrt(1.0 + tc.LN_EPS)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_layer_norm_row_stats(self):
        x = np.random.default_rng(1).normal(size=(5, 7)) * 3 + 2
        out = tc.layer_norm(Tensor(x, dtype=np.float64)).data
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-4)

    def test_empty_last_axis(self):
        for op in (tc.softmax, tc.log_softmax, tc.layer_norm):
            with pytest.raises(DimensionError):
                op(Tensor(np.zeros((2, 0))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-500, 500)))
    def test_softmax_properties(self, z):
        p = tc.softmax(Tensor(z)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert (p >= 0).all() and (p <= 1).all()
        lp = tc.log_softmax(Tensor(z)).data
        with np.errstate(divide="ignore"):
            finite = p > 1e-300
            np.testing.assert_allclose(lp[finite], np.log(p[finite]), atol=1e-6)

    def test_large_logits_stable(self):
        p = tc.softmax(Tensor([[1000.0, 0.0]], dtype=np.float64)).data
        np.testing.assert_allclose(p, [[1.0, 0.0]])


class TestCrossEntropy:
    def test_saturated(self):
        assert tc.cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        assert tc.cross_entropy(Tensor([[0.0, 0.0]], dtype=np.float64), [1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_random_against_hand_oracle(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, size=6)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        expected = np.mean([-math.log(p[i, y[i]]) for i in range(6)])
        got = tc.cross_entropy(Tensor(z, dtype=np.float64), y).item()
        assert got == pytest.approx(expected, abs=1e-10)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(8)
        z = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
        y = np.array([0, 2, 1, 1, 0])
        tc.cross_entropy(z, y).backward()
        p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
        onehot = np.eye(3)[y]
        np.testing.assert_allclose(z.grad, (p - onehot) / 5, atol=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            tc.cross_entropy(Tensor([[0.0, 0.0]]), [2])


class TestKL:
    def test_identity_is_zero(self):
        p = np.array([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
        assert tc.kl_divergence(p, p).item() == 0.0

    def test_point_mass_vs_uniform(self):
        assert tc.kl_divergence([[1.0, 0.0]], [[0.5, 0.5]]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_random_against_elementwise_sum(self):
        rng = np.random.default_rng(11)
        p = rng.dirichlet(np.ones(4), size=5)
        q = rng.dirichlet(np.ones(4), size=5)
        expected = sum(p[i, k] * math.log(p[i, k] / q[i, k]) for i in range(5) for k in range(4)) / 5
        assert tc.kl_divergence(p, q).item() == pytest.approx(expected, abs=1e-10)

    def test_zero_support_rejected(self):
        with pytest.raises(DomainError):
            tc.kl_divergence([[0.5, 0.5]], [[1.0, 0.0]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(3), size=4)
        q = rng.dirichlet(np.ones(3), size=4)
        assert tc.kl_divergence(p, q).item() >= 0.0


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True, dtype=np.float64)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_non_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            (x * 2.0).backward()

    def test_fan_out_accumulates(self):
        x = Tensor(2.0, requires_grad=True, dtype=np.float64)
        y = x * x + x * 3.0 + x
        y.backward()
        assert x.grad == pytest.approx(2 * 2.0 + 3.0 + 1.0)

    def test_two_layer_net_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 4, size=6)
        params = {
            "w1": rng.normal(size=(5, 3)),
            "b1": rng.normal(size=5),
            "g": rng.normal(size=5) + 1.0,
            "c": rng.normal(size=5),
            "w2": rng.normal(size=(4, 5)),
            "b2": rng.normal(size=4),
        }

        def loss(ts):
            h = tc.relu(tc.layer_norm(tc.linear(Tensor(x, dtype=np.float64), ts["w1"], ts["b1"]), ts["g"], ts["c"]))
            return tc.cross_entropy(tc.linear(h, ts["w2"], ts["b2"]), y)

        leaves = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in params.items()}
        loss(leaves).backward()
        for name, arr in params.items():
            num = central_diff(lambda: loss({k: Tensor(v, dtype=np.float64) for k, v in params.items()}).item(), arr)
            ana = leaves[name].grad
            rel = np.abs(ana - num) / np.maximum(np.abs(ana) + np.abs(num), 1e-8)
            assert rel.max() < 1e-4, name

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 3)).astype(np.float32)
        a = tc.log_softmax(tc.layer_norm(Tensor(z))).data
        b = tc.log_softmax(tc.layer_norm(Tensor(z))).data
        assert a.tobytes() == b.tobytes()


def test_nonfinite_surfaces():
    with pytest.raises(NonFiniteError):
        tc.add(Tensor([np.inf]), Tensor([1.0]))
    with pytest.raises(NonFiniteError):
        tc.mul(Tensor([1e30], dtype=np.float32), Tensor([1e30], dtype=np.float32))


def test_softmax_kl_matches_composed_kl():
    rng = np.random.default_rng(2)
    t, s = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    pt = tc.softmax(Tensor(t / 3.0, dtype=np.float64)).data
    ps = tc.softmax(Tensor(s / 3.0, dtype=np.float64)).data
    fused = tc.softmax_kl(t, Tensor(s, dtype=np.float64), 3.0).item()
    assert fused == pytest.approx(tc.kl_divergence(pt, ps).item(), abs=1e-12)


def test_softmax_kl_gradient_finite_differences():
    rng = np.random.default_rng(4)
    t, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    leaf = Tensor(s, requires_grad=True, dtype=np.float64)
    tc.softmax_kl(t, leaf, 2.5).backward()
    num = central_diff(lambda: tc.softmax_kl(t, Tensor(s, dtype=np.float64), 2.5).item(), s)
    np.testing.assert_allclose(leaf.grad, num, atol=1e-8)
