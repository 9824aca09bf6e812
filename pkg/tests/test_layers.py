import numpy as np
import pytest

from lunggan import tensor as T
from lunggan.layers import Adam, BatchNormState, batchnorm, init_weights, leaky_relu, relu, sigmoid
from lunggan.tensor import Graph, ShapeError, Tensor, precision

from conftest import gradcheck


def _bn_state(c, dtype=np.float64, gamma=None, beta=None):
    with precision(dtype):
        st = BatchNormState.create(c)
        if gamma is not None:
            st.gamma.data[:] = gamma
        if beta is not None:
            st.beta.data[:] = beta
    return st


class TestBatchNorm:
    def test_normalized_input_passes_through(self, rng):
        x = rng.normal(size=(4, 2, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        with precision(np.float64):
            out = batchnorm(Tensor(x), _bn_state(2))
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-9)

    def test_zero_gamma_gives_beta(self, rng):
        with precision(np.float64):
            st = _bn_state(3, gamma=0.0, beta=[0.5, -1.0, 2.0])
            out = batchnorm(Tensor(rng.normal(size=(2, 3, 4, 4))), st)
        np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([0.5, -1.0, 2.0])[None, :, None, None],
                                                                out.shape))

    def test_train_statistics(self, rng):
        x = rng.normal(2.0, 3.0, size=(2, 3, 4, 4))
        gamma, beta = np.array([0.5, 1.5, 2.0]), np.array([-1.0, 0.0, 3.0])
        with precision(np.float64):
            out = batchnorm(Tensor(x), _bn_state(3, gamma=gamma, beta=beta)).data
        # direct per-channel statistics of the output
        for c in range(3):
            vals = out[:, c].ravel()
            assert abs(vals.mean() - beta[c]) < 1e-4
            assert abs(vals.var() - gamma[c] ** 2) < 1e-4 * max(1, gamma[c] ** 2)

    def test_running_stats_update(self, rng):
        x = rng.normal(1.0, 2.0, size=(2, 1, 4, 4))
        st = _bn_state(1)
        with precision(np.float64):
            batchnorm(Tensor(x), st)
        assert st.running_mean[0] == pytest.approx(0.1 * x.mean())
        assert st.running_var[0] == pytest.approx(0.9 + 0.1 * x.var())
        assert (st.running_var >= 0).all()

    def test_infer_deterministic(self, rng):
        st = _bn_state(2, dtype=np.float32)
        st.running_mean[:] = [0.3, -0.2]
        st.running_var[:] = [2.0, 0.5]
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        a = batchnorm(x, st, mode="infer").data
        b = batchnorm(x, st, mode="infer").data
        assert a.tobytes() == b.tobytes()
        np.testing.assert_allclose(a, (x.data - st.running_mean[None, :, None, None])
                                   / np.sqrt(st.running_var[None, :, None, None] + 1e-5), rtol=1e-5)

    def test_single_element_rejected(self):
        with pytest.raises(ShapeError):
            batchnorm(Tensor(np.zeros((1, 1, 1, 1))), _bn_state(1, np.float32))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            batchnorm(Tensor(np.zeros((1, 2, 2, 2))), _bn_state(3, np.float32))

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_gradients(self, rng, mode):
        x = rng.normal(size=(2, 3, 3, 3))
        y = rng.normal(size=(2, 3, 3, 3))
        st = _bn_state(3)
        st.running_var[:] = [0.5, 1.0, 2.0]

        def f(x, gamma, beta):
            st.gamma, st.beta = gamma, beta
            return T.sum(T.mul(batchnorm(x, st, mode=mode, track_stats=False), Tensor(y)))

        assert gradcheck(f, [x, rng.normal(size=3), rng.normal(size=3)]) <= 1e-3


class TestActivations:
    def test_leaky_relu_values(self):
        np.testing.assert_allclose(leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.2).data, [-0.2, 0.0, 2.0])

    def test_leaky_relu_slope_one_is_identity(self, rng):
        x = rng.normal(size=(2, 5)).astype(np.float32)
        np.testing.assert_array_equal(leaky_relu(Tensor(x), 1.0).data, x)

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_open_interval(self):
        out = sigmoid(Tensor([-200.0, -30.0, 30.0, 200.0])).data
        assert ((out > 0) & (out < 1)).all()

    def test_relu_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    @pytest.mark.parametrize("fn", [sigmoid, relu, lambda x: leaky_relu(x, 0.2)])
    def test_gradients(self, rng, fn):
        x = rng.normal(size=(2, 3, 4))
        x[np.abs(x) < 0.05] = 0.3
        assert gradcheck(lambda x: T.sum(T.mul(fn(x), fn(x))), [x]) <= 1e-3

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            sigmoid(Tensor([np.nan]))


class TestInit:
    def test_same_seed_identical(self):
        assert init_weights((3, 4), seed=5).data.tobytes() == init_weights((3, 4), seed=5).data.tobytes()

    def test_different_seeds_differ(self):
        assert not np.array_equal(init_weights((3, 4), seed=5).data, init_weights((3, 4), seed=6).data)

    def test_statistics(self):
        w = init_weights((100, 100), seed=0).data
        assert 0.018 <= w.std() <= 0.022
        assert abs(w.mean()) < 0.002


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p})
        before = p.data.copy()
        p.grad = np.zeros(2, np.float32)
        opt.step()
        np.testing.assert_array_equal(p.data, before)
        assert opt.state.t == 1

    def test_one_step_hand_computed(self):
        lr, b1, b2, eps = 0.0002, 0.5, 0.999, 1e-8
        # m = (1-b1), v = (1-b2); bias corrections divide them back to 1
        m_hat = (1 - b1) / (1 - b1)
        v_hat = (1 - b2) / (1 - b2)
        expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=lr, beta1=b1, beta2=b2, eps=eps)
        p.grad = np.ones(1, np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(expected, rel=1e-7)
        assert p.data[0] - 1.0 == pytest.approx(-0.0002, rel=1e-3)

    def test_descends_quadratic(self):
        p = Tensor(np.array([0.7]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        losses = []
        for _ in range(3):
            with Graph() as g:
                loss = T.sum(T.mul(p, p))
            losses.append(loss.item())
            g.backward(loss)
            opt.step()
        assert losses[0] > losses[1] > losses[2]

    def test_sign_invariance_under_gradient_scaling(self, rng):
        g = rng.normal(size=10).astype(np.float32)
        moves = []
        for factor in (1.0, 37.0):
            p = Tensor(np.zeros(10), requires_grad=True)
            opt = Adam({"p": p})
            p.grad = g * factor
            opt.step()
            moves.append(np.sign(p.data))
        np.testing.assert_array_equal(moves[0], moves[1])

    def test_step_without_gradients(self):
        opt = Adam({"p": Tensor(np.zeros(2), requires_grad=True)})
        with pytest.raises(RuntimeError, match="backward"):
            opt.step()

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam({"p": p})
        with pytest.raises(ShapeError):
            opt.step({"p": np.zeros(3, np.float32)})
        assert opt.state.t == 0

    def test_moments_track_shapes(self):
        p = Tensor(np.zeros((2, 3)), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.full((2, 3), -1.0, np.float32)
        opt.step()
        assert opt.state.m["p"].shape == (2, 3) and (opt.state.v["p"] >= 0).all()
