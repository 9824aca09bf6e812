import math

import numpy as np
import pytest

from lunggan.losses import EPS, d_loss, g_adv_loss, g_total, l1_loss
from lunggan.models import build_discriminator, build_generator, discriminate
from lunggan.tensor import Graph, ShapeError, Tensor, precision

from conftest import gradcheck, max_rel_error, numerical_grad


def t64(a):
    return Tensor(np.asarray(a, np.float64), dtype=np.float64)


class TestDLoss:
    def test_perfect_discriminator(self):
        loss = d_loss(t64(np.full((1, 1, 4, 4), 1 - EPS)), t64(np.full((1, 1, 4, 4), EPS)))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_confusion(self):
        half = t64(np.full((1, 1, 3, 3), 0.5))
        assert d_loss(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_elementwise_oracle(self, rng):
        r, f = rng.uniform(0.01, 0.99, (2, 1, 5, 5)), rng.uniform(0.01, 0.99, (2, 1, 5, 5))
        expected = -sum(math.log(v) for v in r.ravel()) / r.size - sum(math.log(1 - v) for v in f.ravel()) / f.size
        assert d_loss(t64(r), t64(f)).item() == pytest.approx(expected, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            d_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), Tensor(np.full((1, 1, 3, 3), 0.5)))


class TestGAdvLoss:
    def test_fooled(self):
        assert g_adv_loss(t64(np.full((1, 1, 2, 2), 1 - EPS))).item() == pytest.approx(0.0, abs=1e-6)

    def test_coin_flip(self):
        assert g_adv_loss(t64(np.full((1, 1, 2, 2), 0.5))).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_elementwise_oracle(self, rng):
        f = rng.uniform(0.01, 0.99, (1, 1, 6, 6))
        expected = -sum(math.log(v) for v in f.ravel()) / f.size
        assert g_adv_loss(t64(f)).item() == pytest.approx(expected, abs=1e-6)

    def test_saturating_form(self):
        assert g_adv_loss(t64(np.full((1, 1, 2, 2), 0.5)), saturating=True).item() == pytest.approx(-math.log(2))

    def test_empty(self):
        with pytest.raises(ShapeError):
            g_adv_loss(Tensor(np.zeros((0,))))

    def test_clamped_scores_finite(self):
        assert math.isfinite(g_adv_loss(Tensor(np.zeros((1, 1, 2, 2)))).item())
        assert math.isfinite(d_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2)))).item())


class TestL1:
    def test_identity(self, rng):
        a = Tensor(rng.random((1, 1, 4, 4)))
        assert l1_loss(a, a).item() == 0.0

    def test_constant_offset(self):
        assert l1_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), Tensor(np.ones((1, 1, 4, 4)))).item() == 0.5

    def test_summation_oracle(self, rng):
        a, b = rng.random((2, 1, 3, 3)), rng.integers(0, 2, (2, 1, 3, 3)).astype(float)
        expected = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert l1_loss(t64(a), t64(b)).item() == pytest.approx(expected, abs=1e-6)

    def test_symmetric_nonnegative(self, rng):
        a, b = Tensor(rng.random((1, 1, 4, 4))), Tensor(rng.random((1, 1, 4, 4)))
        assert l1_loss(a, b).item() == l1_loss(b, a).item() > 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l1_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestGTotal:
    def test_arithmetic(self):
        assert g_total(0.7, 0.02, 100) == pytest.approx(2.7)

    def test_zero_l1(self):
        assert g_total(0.7, 0.0, 100) == 0.7

    def test_alpha_linearity(self):
        assert g_total(0.0, 0.3, 20) * 2 == pytest.approx(g_total(0.0, 0.3, 40))

    @pytest.mark.parametrize("alpha", [0, -1.0])
    def test_alpha_positive(self, alpha):
        with pytest.raises(ValueError):
            g_total(1.0, 1.0, alpha)

    def test_tensor_inputs(self):
        out = g_total(Tensor(0.5), Tensor(0.25), 4.0)
        assert out.item() == pytest.approx(1.5)


class TestLossGradients:
    def test_d_loss(self, rng):
        r, f = rng.uniform(0.05, 0.95, (2, 1, 3, 3)), rng.uniform(0.05, 0.95, (2, 1, 3, 3))
        assert gradcheck(d_loss, [r, f]) <= 1e-3

    @pytest.mark.parametrize("saturating", [False, True])
    def test_g_adv(self, rng, saturating):
        f = rng.uniform(0.05, 0.95, (2, 1, 3, 3))
        assert gradcheck(lambda x: g_adv_loss(x, saturating), [f]) <= 1e-3

    def test_l1(self, rng):
        a = rng.uniform(0.05, 0.95, (2, 1, 3, 3))
        b = rng.integers(0, 2, (2, 1, 3, 3)).astype(float)
        assert gradcheck(l1_loss, [a, b]) <= 1e-3

    def test_total_is_linear_in_backward(self, rng):
        """grad(adv + alpha*l1) == grad(adv) + alpha*grad(l1) on a tiny generator, checked by FD too."""
        alpha = 10.0
        with precision(np.float64):
            G = build_generator(64, base_channels=2, depth=3, seed=1)
            D = build_discriminator("D2", 64, base_channels=2, seed=2)
            x = Tensor(rng.random((1, 1, 64, 64)))
            y = Tensor((rng.random((1, 1, 64, 64)) > 0.5).astype(float))
            D.set_requires_grad(False)
            w = G.params["head.conv.weight"]

            def grads(fn):
                with Graph() as g:
                    fake = G.forward(x, track_stats=False)
                    loss = fn(fake)
                g.backward(loss, params=[w])
                return w.grad.copy(), loss.item()

            adv = lambda f: g_adv_loss(discriminate(D, x, f, track_stats=False))  # noqa: E731
            ga, _ = grads(adv)
            gl, _ = grads(lambda f: l1_loss(f, y))
            gt, _ = grads(lambda f: g_total(adv(f), l1_loss(f, y), alpha))
            np.testing.assert_allclose(gt, ga + alpha * gl, rtol=1e-10, atol=1e-12)

            base = w.data.copy()

            def f(warr):
                w.data = warr
                out = G.forward(x, track_stats=False)
                val = g_total(adv(out), l1_loss(out, y), alpha).item()
                w.data = base
                return val

            fd = numerical_grad(f, [base.copy()], 0)
        assert max_rel_error(gt, fd) <= 1e-3

    def test_batch_permutation_invariance(self, rng):
        r, f = rng.uniform(0.05, 0.95, (3, 1, 4, 4)), rng.uniform(0.05, 0.95, (3, 1, 4, 4))
        perm = [2, 0, 1]
        assert d_loss(t64(r), t64(f)).item() == pytest.approx(d_loss(t64(r[perm]), t64(f[perm])).item(), abs=1e-12)
        assert g_adv_loss(t64(f)).item() == pytest.approx(g_adv_loss(t64(f[perm])).item(), abs=1e-12)
        assert l1_loss(t64(r), t64(f)).item() == pytest.approx(l1_loss(t64(r[perm]), t64(f[perm])).item(),
                                                               abs=1e-12)

    def test_antagonism(self):
        """d_loss falls as real->1 and fake->0 while g_adv rises, and vice versa."""
        real = [0.6, 0.9, 0.99]
        fake = [0.4, 0.1, 0.01]
        dl = [d_loss(t64(np.full((1, 1, 2, 2), r)), t64(np.full((1, 1, 2, 2), f))).item() for r, f in zip(real, fake)]
        gl = [g_adv_loss(t64(np.full((1, 1, 2, 2), f))).item() for f in fake]
        assert dl[0] > dl[1] > dl[2]
        assert gl[0] < gl[1] < gl[2]
