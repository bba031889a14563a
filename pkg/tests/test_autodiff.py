"""Layer-level oracles for the autodiff engine.

Every layer is checked against an independent implementation (quadruple-loop
convolution, recomputed moments, hand-evaluated updates) and against central
finite differences.
"""

import numpy as np
import pytest

from metaloc.autodiff import (
    BatchNormState,
    OptimizerState,
    Tensor,
    add,
    backward,
    batchnorm,
    conv2d,
    dense,
    flatten,
    he_uniform,
    mse_loss,
    optimizer_step,
    relu,
    scale,
    tensor_sum,
)
from metaloc.errors import ContractError, ShapeError


def naive_conv2d_same(x, w, b, stride):
    """Direct-sum convolution oracle: explicit loops, no shared code."""
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    sh, sw = stride
    oh = -(-h // sh)
    ow = -(-wd // sw)
    pad_h = max((oh - 1) * sh + kh - h, 0)
    pad_w = max((ow - 1) * sw + kw - wd, 0)
    ph0, pw0 = pad_h // 2, pad_w // 2
    y = np.zeros((bsz, oh, ow, cout))
    for n in range(bsz):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            si = i * sh - ph0 + di
                            sj = j * sw - pw0 + dj
                            if 0 <= si < h and 0 <= sj < wd:
                                for ci in range(cin):
                                    acc += x[n, si, sj, ci] * w[di, dj, ci, co]
                    y[n, i, j, co] = acc + b[co]
    return y


def finite_difference(f, x, h=1e-5):
    """Central differences of a scalar function of a flat array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 5, 6, 1)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        y = conv2d(x, w, b, stride=(1, 1))
        np.testing.assert_array_equal(y.data, x.data)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 6, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        for stride in [(1, 1), (1, 2), (2, 3)]:
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
            want = naive_conv2d_same(x, w, b, stride)
            assert rel_err(got, want) < 1e-12

    def test_model_scale_output_shape(self):
        # 32x52x3 fingerprint, 32 filters, 4x4 kernel, stride (1,4) -> 32x13x32
        x = Tensor(np.zeros((1, 32, 52, 3)))
        w = Tensor(np.zeros((4, 4, 3, 32)))
        b = Tensor(np.zeros(32))
        y = conv2d(x, w, b, stride=(1, 4))
        assert y.data.shape == (1, 32, 13, 32)

    def test_shape_mismatch_raises(self):
        x = Tensor(np.zeros((1, 4, 4, 3)))
        w = Tensor(np.zeros((2, 2, 5, 8)))
        with pytest.raises(ShapeError):
            conv2d(x, w, Tensor(np.zeros(8)))

    @pytest.mark.parametrize("stride", [(1, 1), (1, 4), (2, 2)])
    def test_gradients_match_finite_differences(self, stride):
        rng = np.random.default_rng(2)
        xv = rng.normal(size=(2, 6, 8, 3))
        wv = rng.normal(size=(3, 4, 3, 5))
        bv = rng.normal(size=5)

        def loss_value():
            y = conv2d(Tensor(xv), Tensor(wv), Tensor(bv), stride=stride)
            return float(np.mean(y.data * y.data))

        x, w, b = Tensor(xv, True), Tensor(wv, True), Tensor(bv, True)
        y = conv2d(x, w, b, stride=stride)
        backward(mse_loss(y, Tensor(np.zeros_like(y.data))))

        for tensor, val in [(x, xv), (w, wv), (b, bv)]:
            num = finite_difference(loss_value, val)
            assert rel_err(tensor.grad, num) < 1e-6


class TestBatchNorm:
    def test_already_normalized_identity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(512, 4))
        x = (x - x.mean(0)) / x.std(0)
        st = BatchNormState.create(4)
        y = batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), st, "train")
        np.testing.assert_allclose(y.data, x, atol=1e-4)

    def test_moments_recompute_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(2.0, 3.0, size=(8, 5, 6, 3))
        st = BatchNormState.create(3)
        y = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st, "train")
        mu = y.data.reshape(-1, 3).mean(0)
        var = y.data.reshape(-1, 3).var(0)
        assert np.abs(mu).max() < 1e-9
        np.testing.assert_allclose(var, 1.0, atol=1e-4)

    def test_gamma_zero_collapses_to_beta(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3))
        beta = np.array([1.0, -2.0, 0.5])
        st = BatchNormState.create(3)
        y = batchnorm(Tensor(x), Tensor(np.zeros(3)), Tensor(beta), st, "train")
        np.testing.assert_array_equal(y.data, np.broadcast_to(beta, (4, 3)))

    def test_running_stats_and_eval_mode(self):
        rng = np.random.default_rng(6)
        x = rng.normal(1.0, 2.0, size=(64, 3))
        st = BatchNormState.create(3)
        g, bta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        batchnorm(Tensor(x), g, bta, st, "train")
        np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(0), rtol=1e-12)
        np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(0), rtol=1e-12)
        y = batchnorm(Tensor(x), g, bta, st, "eval")
        want = (x - st.running_mean) / np.sqrt(st.running_var + 1e-5)
        np.testing.assert_allclose(y.data, want, rtol=1e-12)

    def test_single_element_per_channel_rejected(self):
        st = BatchNormState.create(3)
        with pytest.raises(ContractError):
            batchnorm(Tensor(np.zeros((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), st, "train")

    def test_single_sample_conv_input_allowed(self):
        # one sample still has spatial extent, so per-channel stats exist
        st = BatchNormState.create(2)
        x = np.random.default_rng(7).normal(size=(1, 4, 4, 2))
        y = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, "train")
        assert np.isfinite(y.data).all()

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients_match_finite_differences(self, mode):
        rng = np.random.default_rng(8)
        xv = rng.normal(size=(6, 3, 4))
        gv = rng.normal(size=4)
        bv = rng.normal(size=4)
        target = rng.normal(size=(6, 3, 4))
        base = BatchNormState(rng.normal(size=4), rng.uniform(0.5, 2.0, size=4))

        def run(xa, ga, ba):
            st = base.copy()
            y = batchnorm(Tensor(xa), Tensor(ga, True), Tensor(ba, True), st, mode)
            return ((y.data - target) ** 2).mean()

        x, g, b = Tensor(xv, True), Tensor(gv, True), Tensor(bv, True)
        st = base.copy()
        y = batchnorm(x, g, b, st, mode)
        backward(mse_loss(y, Tensor(target)))

        for tensor, val in [(x, xv), (g, gv), (b, bv)]:
            num = finite_difference(lambda: run(xv, gv, bv), val)
            assert rel_err(tensor.grad, num) < 1e-6


class TestDenseReluAddFlatten:
    def test_dense_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        y = dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_relu_definition(self):
        y = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_add_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        y = add(Tensor(a), Tensor(b))
        want = np.empty_like(a)
        for i in range(3):
            for j in range(4):
                want[i, j] = a[i, j] + b[i, j]
        np.testing.assert_array_equal(y.data, want)

    def test_flatten_row_major(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        y = flatten(Tensor(x))
        np.testing.assert_array_equal(y.data, x.reshape(2, 12))

    def test_dense_gradients(self):
        rng = np.random.default_rng(10)
        xv, wv, bv = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        t = rng.normal(size=(5, 2))
        x, w, b = Tensor(xv, True), Tensor(wv, True), Tensor(bv, True)
        backward(mse_loss(dense(x, w, b), Tensor(t)))

        def run():
            return ((xv @ wv + bv - t) ** 2).mean()

        for tensor, val in [(x, xv), (w, wv), (b, bv)]:
            num = finite_difference(run, val)
            assert rel_err(tensor.grad, num) < 1e-6


class TestMseLoss:
    def test_zero_residual(self):
        p = np.array([[1.0, 2.0]])
        assert mse_loss(Tensor(p), Tensor(p.copy())).data == 0.0

    def test_hand_value(self):
        pred = Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
        label = Tensor(np.array([[1.0, 1.0], [1.0, 1.0]]))
        assert mse_loss(pred, label).data == pytest.approx(0.5)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(11)
        p = rng.normal(size=(7, 2))
        t = rng.normal(size=(7, 2))
        perm = rng.permutation(7)
        a = mse_loss(Tensor(p), Tensor(t)).data
        b = mse_loss(Tensor(p[perm]), Tensor(t[perm])).data
        assert a == pytest.approx(b, rel=1e-15)

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            mse_loss(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))))


class TestBackward:
    def test_sum_of_parameters_gives_unit_gradients(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.normal(size=(3, 2)), True)
        b = Tensor(rng.normal(size=(3, 2)), True)
        backward(tensor_sum(add(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((3, 2)))
        np.testing.assert_array_equal(b.grad, np.ones((3, 2)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), True)
        with pytest.raises(ContractError):
            backward(relu(x))

    def test_accumulators_zeroed_between_calls(self):
        x = Tensor(np.array([[1.0, 2.0]]), True)
        y = mse_loss(x, Tensor(np.zeros((1, 2))))
        backward(y)
        first = x.grad.copy()
        backward(y)
        np.testing.assert_array_equal(x.grad, first)

    def test_gradient_linearity(self):
        rng = np.random.default_rng(13)
        xv = rng.normal(size=(4, 3))
        t1 = rng.normal(size=(4, 3))
        t2 = rng.normal(size=(4, 3))

        def grads_of(alpha, beta):
            x = Tensor(xv, True)
            h = relu(x)
            l1 = mse_loss(h, Tensor(t1))
            l2 = mse_loss(h, Tensor(t2))
            backward(add(scale(l1, alpha), scale(l2, beta)))
            return x.grad.copy()

        g1 = grads_of(1.0, 0.0)
        g2 = grads_of(0.0, 1.0)
        g_combo = grads_of(0.7, -1.3)
        np.testing.assert_allclose(g_combo, 0.7 * g1 - 1.3 * g2, atol=1e-12)


class TestOptimizer:
    def test_sgd_zero_gradient_no_change(self):
        p = {"w": Tensor(np.array([1.0, 2.0]), True)}
        st = OptimizerState(kind="sgd", lr=0.1)
        optimizer_step(p, {"w": np.zeros(2)}, st)
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])

    def test_adam_single_step_hand_value(self):
        p = {"w": Tensor(np.array([0.0]), True)}
        st = OptimizerState(kind="adam", lr=1e-3)
        optimizer_step(p, {"w": np.array([1.0])}, st)
        # bias-corrected first step: -lr * 1 / (1 + eps)
        want = -1e-3 * (1.0 / (1.0 + 1e-8))
        assert p["w"].data[0] == pytest.approx(want, rel=1e-12)
        assert st.step_count == 1

    def test_sgd_two_steps_accumulate_linearly(self):
        p = {"w": Tensor(np.array([5.0]), True)}
        st = OptimizerState(kind="sgd", lr=0.25)
        g = {"w": np.array([2.0])}
        optimizer_step(p, g, st)
        optimizer_step(p, g, st)
        assert p["w"].data[0] == 5.0 - 2 * 0.25 * 2.0

    def test_shape_mismatch_rejected(self):
        p = {"w": Tensor(np.zeros(3), True)}
        st = OptimizerState(kind="sgd")
        with pytest.raises(ShapeError):
            optimizer_step(p, {"w": np.zeros(4)}, st)


class TestComposedGradients:
    """Finite-difference check through a conv+bn+relu+skip+dense stack."""

    def _build_params(self, rng):
        return {
            "conv.w": Tensor(he_uniform((3, 3, 2, 8), 18, rng), True),
            "conv.b": Tensor(np.zeros(8), True),
            "bn.gamma": Tensor(np.ones(8), True),
            "bn.beta": Tensor(np.zeros(8), True),
            "skip.w": Tensor(he_uniform((1, 1, 2, 8), 2, rng), True),
            "skip.b": Tensor(np.zeros(8), True),
            "fc.w": Tensor(he_uniform((4 * 2 * 8, 2), 64, rng), True),
            "fc.b": Tensor(np.zeros(2), True),
        }

    def _forward(self, params, x, target, st):
        main = conv2d(x, params["conv.w"], params["conv.b"], stride=(1, 2))
        main = relu(batchnorm(main, params["bn.gamma"], params["bn.beta"], st, "train"))
        skip = conv2d(x, params["skip.w"], params["skip.b"], stride=(1, 2))
        merged = add(main, skip)
        pred = dense(flatten(merged), params["fc.w"], params["fc.b"])
        return mse_loss(pred, target)

    def test_full_stack_finite_differences(self):
        rng = np.random.default_rng(14)
        xv = rng.uniform(0, 1, size=(4, 4, 4, 2))
        tv = rng.normal(size=(4, 2))
        params = self._build_params(rng)
        st = BatchNormState.create(8)

        loss = self._forward(params, Tensor(xv, True), Tensor(tv), st)
        backward(loss)
        grads = {k: v.grad.copy() for k, v in params.items()}

        def value():
            st2 = BatchNormState.create(8)
            return float(self._forward(params, Tensor(xv), Tensor(tv), st2).data)

        checked = 0
        rng2 = np.random.default_rng(15)
        for name, tensor in params.items():
            flat = tensor.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            idx = rng2.choice(flat.size, size=min(100, flat.size), replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + 1e-5
                fp = value()
                flat[i] = old - 1e-5
                fm = value()
                flat[i] = old
                num = (fp - fm) / 2e-5
                # floor keeps FD cancellation noise (~1e-11) from dominating
                # coordinates whose true gradient is structurally zero
                denom = max(abs(num), abs(gflat[i]), 1e-6)
                assert abs(num - gflat[i]) / denom < 1e-4, name
                checked += 1
        assert checked >= 200
