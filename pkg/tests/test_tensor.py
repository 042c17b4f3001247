import numpy as np
import pytest

from snapsearch import tensor as T


def brute_conv2d(x, w):
    """Sliding-window oracle: standard same-padding stride-1 conv, any odd k."""
    c_out, c_in, k, _ = w.shape
    n, c, h, wd = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c_out, h, wd))
    for ni in range(n):
        for o in range(c_out):
            for i in range(h):
                for j in range(wd):
                    out[ni, o, i, j] = np.sum(xp[ni, :, i:i + k, j:j + k] * w[o])
    return out


def brute_maxpool3(x, stride):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ho = (h + 1) // stride if stride == 2 else h
    wo = (wd + 1) // stride if stride == 2 else wd
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[ni, ci, i, j] = xp[ni, ci, i * stride:i * stride + 3, j * stride:j * stride + 3].max()
    return out


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(size=(3, 5, 5)))
        eye = T.Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = T.conv2d(x, eye)
        np.testing.assert_allclose(out.data, x.data)

    def test_ones_kernel_hand_computed(self):
        # 3x3 all-ones kernel over a 3x3 image of ones: center sees the full
        # window (9.0), corners see a 2x2 overlap (4.0)
        x = T.Tensor(np.ones((1, 3, 3)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w).data[0]
        assert out[1, 1] == 9.0
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[i, j] == 4.0
        for i, j in [(0, 1), (1, 0), (1, 2), (2, 1)]:
            assert out[i, j] == 6.0

    def test_shape_contract(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.normal(size=(3, 8, 8)))
        w = T.Tensor(rng.normal(size=(5, 3, 3, 3)))
        assert T.conv2d(x, w).shape == (5, 8, 8)

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        got = T.conv2d(T.Tensor(x), T.Tensor(w)).data
        np.testing.assert_allclose(got, brute_conv2d(x, w), atol=1e-12)

    def test_1x1_matches_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 5, 5))
        w = rng.normal(size=(3, 4, 1, 1))
        got = T.conv2d(T.Tensor(x), T.Tensor(w)).data
        np.testing.assert_allclose(got, brute_conv2d(x, w), atol=1e-12)

    def test_depthwise_matches_per_channel_conv(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(3, 1, 3, 3))
        got = T.conv2d(T.Tensor(x), T.Tensor(w), mode="depthwise").data
        want = np.stack([
            brute_conv2d(x[:, c:c + 1], w[c:c + 1])[:, 0] for c in range(3)
        ], axis=1)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_channel_mismatch_raises(self):
        x = T.Tensor(np.zeros((3, 4, 4)))
        w = T.Tensor(np.zeros((5, 2, 3, 3)))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, w)


class TestMaxpool:
    def test_constant_input(self):
        x = T.Tensor(np.full((2, 4, 4), 3.5))
        out = T.maxpool3(x, stride=1)
        np.testing.assert_allclose(out.data, x.data)

    def test_center_sees_max(self):
        x = T.Tensor(np.arange(1.0, 10.0).reshape(1, 3, 3))
        out = T.maxpool3(x, stride=1)
        assert out.data[0, 1, 1] == 9.0

    def test_stride2_shape(self):
        x = T.Tensor(np.zeros((4, 8, 8)))
        assert T.maxpool3(x, stride=2).shape == (4, 4, 4)

    def test_matches_window_enumeration(self):
        rng = np.random.default_rng(5)
        for stride in (1, 2):
            x = rng.normal(size=(2, 3, 7, 6))
            got = T.maxpool3(T.Tensor(x), stride=stride).data
            np.testing.assert_allclose(got, brute_maxpool3(x, stride))

    def test_tie_gradient_goes_to_lowest_index(self):
        x = T.Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True)
        x.zero_grad()
        out = T.maxpool3(x, stride=2)
        T.tsum(out).backward()
        # ties resolve to the lowest in-window linear index, so each of the
        # four stride-2 windows routes its gradient to its top-left real cell
        want = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(x.grad[0, 0], want)


class TestBatchNorm:
    def test_normalized_input_is_identity_before_relu(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(16, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        state = T.BatchNormState(3, eps=1e-12)
        out = T.batchnorm_relu(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), state, train=True)
        np.testing.assert_allclose(out.data, np.maximum(x, 0), atol=1e-6)

    def test_all_negative_gives_zero(self):
        x = np.full((4, 2, 3, 3), 5.0)
        state = T.BatchNormState(2)
        # scale 1, shift -1: normalized constant input is 0, affine gives -1
        out = T.batchnorm_relu(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(-np.ones(2)), state, train=True)
        assert np.all(out.data == 0.0)

    def test_running_mean_ema(self):
        x = np.ones((4, 1, 2, 2))
        state = T.BatchNormState(1, momentum=0.9)
        T.batchnorm_relu(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), state, train=True)
        np.testing.assert_allclose(state.running_mean, [0.1])

    def test_zero_batch_raises(self):
        state = T.BatchNormState(2)
        with pytest.raises(T.InvalidBatch):
            T.batchnorm_relu(T.Tensor(np.zeros((0, 2, 3, 3))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), state, train=True)

    def test_eval_uses_running_stats(self):
        state = T.BatchNormState(1, eps=0.0)
        state.running_mean[:] = 2.0
        state.running_var[:] = 4.0
        x = np.full((1, 1, 1, 1), 6.0)
        out = T.batchnorm_relu(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), state, train=False)
        np.testing.assert_allclose(out.data, [[[[2.0]]]])


class TestRecurrent:
    def _params(self, rng, d, u, dtype=np.float64):
        return (
            T.Tensor(rng.normal(size=(d, 4 * u)).astype(dtype) * 0.3),
            T.Tensor(rng.normal(size=(u, 4 * u)).astype(dtype) * 0.3),
            T.Tensor(rng.normal(size=4 * u).astype(dtype) * 0.3),
        )

    def test_zero_params_zero_state_gives_zero(self):
        d, u = 3, 4
        x = T.Tensor(np.ones((2, d)))
        h = T.Tensor(np.zeros((2, u)))
        c = T.Tensor(np.zeros((2, u)))
        zp = [T.Tensor(np.zeros(s)) for s in [(d, 4 * u), (u, 4 * u), (4 * u,)]]
        h2, c2 = T.recurrent_step(x, h, c, *zp)
        np.testing.assert_allclose(h2.data, 0.0)

    def test_sequence_matches_stepwise(self):
        rng = np.random.default_rng(7)
        d, u, t, b = 3, 4, 5, 2
        wx, wh, bias = self._params(rng, d, u)
        xs = rng.normal(size=(t, b, d))
        h = T.Tensor(np.zeros((b, u)))
        c = T.Tensor(np.zeros((b, u)))
        outs = []
        for i in range(t):
            h, c = T.recurrent_step(T.Tensor(xs[i]), h, c, wx, wh, bias)
            outs.append(h.data)
        fused = T.lstm_sequence(T.Tensor(xs), T.Tensor(np.zeros((b, u))), T.Tensor(np.zeros((b, u))), wx, wh, bias)
        np.testing.assert_allclose(fused.data, np.stack(outs), atol=1e-12)

    def test_reverse_matches_flipped(self):
        rng = np.random.default_rng(8)
        d, u, t, b = 2, 3, 4, 2
        wx, wh, bias = self._params(rng, d, u)
        xs = rng.normal(size=(t, b, d))
        z = lambda: T.Tensor(np.zeros((b, u)))
        rev = T.lstm_sequence(T.Tensor(xs), z(), z(), wx, wh, bias, reverse=True)
        fwd_flip = T.lstm_sequence(T.Tensor(xs[::-1].copy()), z(), z(), wx, wh, bias)
        np.testing.assert_allclose(rev.data, fwd_flip.data[::-1], atol=1e-12)

    def test_step_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        d, u, b = 2, 3, 2
        x = rng.normal(size=(b, d))
        target = rng.normal(size=(b, u))

        def fn(params):
            wx, wh, bias, h0, c0 = params
            h2, _ = T.recurrent_step(T.Tensor(x), h0, c0, wx, wh, bias)
            return T.mse_loss(h2, T.Tensor(target))

        wx, wh, bias = self._params(rng, d, u)
        h0 = T.Tensor(rng.normal(size=(b, u)))
        c0 = T.Tensor(rng.normal(size=(b, u)))
        report = T.grad_check(fn, [wx, wh, bias, h0, c0])
        assert report["max_rel_error"] < 1e-4


class TestDense:
    def test_zero_params_tanh(self):
        out = T.dense(T.Tensor(np.ones((2, 3))), T.Tensor(np.zeros((4, 3))), T.Tensor(np.zeros(4)), "tanh")
        np.testing.assert_allclose(out.data, 0.0)

    def test_softmax_uniform(self):
        out = T.dense(T.Tensor(np.zeros((1, 5))), T.Tensor(np.zeros((9, 5))), T.Tensor(np.zeros(9)), "softmax")
        np.testing.assert_allclose(out.data, 1.0 / 9.0)

    def test_affine_arithmetic(self):
        out = T.dense(T.Tensor([[3.0, 4.0]]), T.Tensor([[1.0, 2.0]]), T.Tensor([0.5]), "none")
        np.testing.assert_allclose(out.data, [[11.5]])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        out = T.softmax(T.Tensor(rng.normal(size=(6, 9)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)


class TestLoss:
    def test_mse_self_is_zero(self):
        x = T.Tensor(np.arange(4.0))
        assert T.loss("mse", x, x).item() == 0.0

    def test_cross_entropy_uniform(self):
        pred = T.Tensor(np.full((1, 9), 1.0 / 9.0))
        target = T.Tensor(np.eye(9)[:1])
        np.testing.assert_allclose(T.loss("cross_entropy", pred, target).item(), np.log(9), atol=1e-12)

    def test_mse_arithmetic(self):
        got = T.loss("mse", T.Tensor([1.0, 3.0]), T.Tensor([0.0, 1.0])).item()
        assert got == 2.5

    def test_losses_nonnegative(self):
        rng = np.random.default_rng(11)
        p = T.softmax(T.Tensor(rng.normal(size=(4, 9))))
        t = T.Tensor(np.eye(9)[rng.integers(0, 9, size=4)])
        assert T.loss("cross_entropy", p, t).item() >= 0
        assert T.loss("mse", p, t).item() >= 0


class TestOptimizer:
    def test_rmsprop_first_step_closed_form(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        opt = T.Optimizer({"p": p}, kind="rmsprop", lr=0.1, rho=0.9, eps=1e-8)
        p.grad = np.array([2.0])
        opt.step()
        expect = 1.0 - 0.1 * 2.0 / (np.sqrt(0.1 * 4.0) + 1e-8)
        np.testing.assert_allclose(p.data, [expect])

    def test_zero_gradient_no_change(self):
        p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = T.Optimizer({"p": p}, kind="adam", lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0, -2.0])

    def test_adam_first_step_is_signed_lr(self):
        p = T.Tensor(np.array([0.0]), requires_grad=True)
        opt = T.Optimizer({"p": p}, kind="adam", lr=0.01)
        p.grad = np.array([3.7])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.01], atol=1e-6)

    def test_non_finite_gradient_raises(self):
        p = T.Tensor(np.array([0.0]), requires_grad=True)
        opt = T.Optimizer({"p": p}, kind="adam", lr=0.01)
        p.grad = np.array([np.nan])
        with pytest.raises(T.NonFiniteGradient):
            opt.step()


class TestGradCheck:
    def test_mse_analytic(self):
        x0 = np.array([1.0, 2.0, 3.0])
        y = np.array([0.5, 1.5, 9.0])

        def fn(params):
            return T.mse_loss(params[0], T.Tensor(y))

        x = T.Tensor(x0.copy())
        x.requires_grad = True
        x.zero_grad()
        out = fn([x])
        out.backward()
        np.testing.assert_allclose(x.grad, 2 * (x0 - y) / 3, atol=1e-12)

    def test_conv_relu_dense_mse_graph(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 2, 4, 4))
        target = rng.normal(size=(2, 3))

        def fn(params):
            w, b, dw, db = params
            h = T.relu(T.conv2d(T.Tensor(x), w, b))
            flat = T.reshape(h, (2, -1))
            out = T.dense(flat, dw, db)
            return T.mse_loss(out, T.Tensor(target))

        params = [
            T.Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.5),
            T.Tensor(rng.normal(size=2) * 0.1),
            T.Tensor(rng.normal(size=(3, 32)) * 0.3),
            T.Tensor(rng.normal(size=3) * 0.1),
        ]
        report = T.grad_check(fn, params)
        assert report["max_rel_error"] < 1e-4

    def test_batchnorm_train_mode(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(4, 2, 3, 3))
        target = rng.normal(size=(4, 2, 3, 3))

        def fn(params):
            gamma, beta = params
            state = T.BatchNormState(2)  # fresh state: EMA side effect kept out of the check
            out = T.batchnorm_relu(T.Tensor(x), gamma, beta, state, train=True)
            return T.mse_loss(out, T.Tensor(target))

        params = [T.Tensor(rng.normal(size=2) + 1.5), T.Tensor(rng.normal(size=2))]
        report = T.grad_check(fn, params)
        assert report["max_rel_error"] < 1e-3

    def test_batchnorm_input_gradient(self):
        rng = np.random.default_rng(14)
        target = rng.normal(size=(3, 2, 2, 2))
        x0 = rng.normal(size=(3, 2, 2, 2))

        def fn(params):
            state = T.BatchNormState(2)
            out = T.batchnorm_relu(params[0], T.Tensor(np.array([1.1, 0.9])), T.Tensor(np.array([0.05, -0.02])), state, train=True)
            return T.mse_loss(out, T.Tensor(target))

        report = T.grad_check(fn, [T.Tensor(x0)])
        assert report["max_rel_error"] < 1e-3


class TestEngine:
    def test_forward_deterministic(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(1, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        a = T.conv2d(T.Tensor(x), T.Tensor(w)).data
        b = T.conv2d(T.Tensor(x), T.Tensor(w)).data
        assert np.array_equal(a, b)

    def test_non_influencing_param_stays_zero(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        b = T.Tensor(np.ones(3), requires_grad=True)
        a.zero_grad()
        b.zero_grad()
        T.tsum(T.mul(a, a)).backward()
        assert np.array_equal(b.grad, np.zeros(3))
        assert np.all(a.grad != 0)

    def test_concat_channel_counts(self):
        x = T.Tensor(np.zeros((1, 3, 2, 2)))
        y = T.Tensor(np.zeros((1, 5, 2, 2)))
        assert T.concat([x, y], axis=1).shape == (1, 8, 2, 2)

    def test_concat_narrow_roundtrip_grads(self):
        rng = np.random.default_rng(16)

        def fn(params):
            a, b = params
            cat = T.concat([a, b], axis=1)
            return T.mse_loss(T.narrow(cat, 1, 1, 3), T.Tensor(np.ones((2, 3))))

        report = T.grad_check(fn, [T.Tensor(rng.normal(size=(2, 2))), T.Tensor(rng.normal(size=(2, 2)))])
        assert report["max_rel_error"] < 1e-6

    def test_no_grad_builds_no_tape(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.mul(a, a)
        assert out._backward is None and not out.requires_grad

    def test_save_load_roundtrip(self, tmp_path):
        arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.float32([1, 2])}
        prefix = str(tmp_path / "params")
        T.save_params(prefix, arrays)
        loaded = T.load_params(prefix)
        assert set(loaded) == {"w", "b"}
        np.testing.assert_array_equal(loaded["w"], arrays["w"])
        assert loaded["b"].dtype == np.float32
