import pytest
import torch

from latentwave import nn_core
from latentwave.errors import NumericalError, ShapeError


def randn(*shape, seed=0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


class TestConvolutions:
    def test_valid_length(self):
        out = nn_core.conv1d(randn(2, 3, 10), randn(4, 3, 3))
        assert out.shape == (2, 4, 8)

    def test_strided_and_padded_length(self):
        out = nn_core.conv1d(randn(1, 3, 10), randn(4, 3, 3), stride=2, padding=1)
        assert out.shape == (1, 4, 5)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nn_core.conv1d(randn(1, 2, 10), randn(4, 3, 3))

    def test_kernel_longer_than_input(self):
        with pytest.raises(ShapeError):
            nn_core.conv1d(randn(1, 3, 2), randn(4, 3, 3))

    def test_transpose_is_the_adjoint(self):
        w = randn(4, 3, 2, seed=1)
        x = randn(1, 3, 8, seed=2)
        y = randn(1, 4, 4, seed=3)
        lhs = (nn_core.conv1d(x, w, stride=2) * y).sum()
        rhs = (x * nn_core.conv_transpose1d(y, w, stride=2)).sum()
        assert lhs.item() == pytest.approx(rhs.item(), abs=1e-12)

    def test_conv2d_shape(self):
        out = nn_core.conv2d(randn(1, 1, 8, 8), randn(2, 1, 3, 3), stride=2, padding=1)
        assert out.shape == (1, 2, 4, 4)


class TestNormalization:
    def test_global_instance_norm(self):
        out = nn_core.instance_norm(randn(2, 3, 50) * 4 + 1)
        assert out.mean(dim=-1).abs().max().item() < 1e-10
        assert out.var(dim=-1, unbiased=False).sub(1).abs().max().item() < 1e-4

    def test_full_window_matches_global(self):
        x = randn(1, 2, 9)
        windowed = nn_core.instance_norm(x, window=9)
        assert windowed.shape == (1, 2, 1)
        torch.testing.assert_close(windowed[..., 0], nn_core.instance_norm(x)[..., 4], rtol=0, atol=1e-10)

    def test_window_must_be_odd(self):
        with pytest.raises(ShapeError):
            nn_core.instance_norm(randn(1, 2, 9), window=4)

    def test_sa_adain_with_zero_modulation_is_instance_norm(self):
        x = randn(2, 3, 12)
        coords, style = randn(2, 4, 10, seed=1), randn(2, 5, seed=2)
        weight, bias = torch.zeros(6, 9, dtype=torch.float64), torch.zeros(6, dtype=torch.float64)
        out = nn_core.sa_adain(x, coords, style, weight, bias, window=3)
        torch.testing.assert_close(out, nn_core.instance_norm(x, 3))

    def test_sa_adain_coordinate_length_must_match(self):
        x = randn(1, 3, 12)
        with pytest.raises(ShapeError):
            nn_core.sa_adain(x, randn(1, 4, 12), randn(1, 5), torch.zeros(6, 9, dtype=torch.float64),
                             torch.zeros(6, dtype=torch.float64), window=3)

    def test_sa_adain_is_local(self):
        """Changing coordinates at one position only changes that output position."""
        x = randn(1, 3, 12)
        coords, style = randn(1, 4, 10, seed=1), randn(1, 5, seed=2)
        weight, bias = randn(6, 9, seed=3), randn(6, seed=4)
        a = nn_core.sa_adain(x, coords, style, weight, bias, window=3)
        coords2 = coords.clone()
        coords2[..., 7] += 1.0
        b = nn_core.sa_adain(x, coords2, style, weight, bias, window=3)
        changed = (a - b).abs().sum(dim=(0, 1)) > 0
        assert changed.tolist() == [i == 7 for i in range(10)]


class TestSLE:
    def test_global_gate_broadcasts(self):
        high = randn(2, 4, 6)
        out = nn_core.sle_gate(randn(2, 3, 10), high, randn(5, 3), randn(5), randn(4, 5), randn(4))
        assert out.shape == high.shape
        assert torch.all(out.abs() <= high.abs())

    def test_windowed_gate_must_align(self):
        with pytest.raises(ShapeError):
            nn_core.sle_gate(randn(1, 3, 10), randn(1, 4, 6), randn(5, 3), randn(5), randn(4, 5), randn(4), window=3)

    def test_windowed_gate_aligned(self):
        out = nn_core.sle_gate(randn(1, 3, 10), randn(1, 4, 6), randn(5, 3), randn(5), randn(4, 5), randn(4), window=5)
        assert out.shape == (1, 4, 6)


class TestSpectralNorm:
    def test_power_iteration_converges_to_largest_singular_value(self):
        w = randn(6, 4, 3)
        u = torch.nn.functional.normalize(randn(6, seed=5), dim=0)
        normed, _, _, sigma = nn_core.spectral_norm_apply(w, u, n_power_iterations=200)
        expected = torch.linalg.matrix_norm(w.reshape(6, -1), ord=2)
        assert sigma.item() == pytest.approx(expected.item(), rel=1e-6)
        assert torch.linalg.matrix_norm(normed.reshape(6, -1), ord=2).item() == pytest.approx(1.0, rel=1e-6)

    def test_eval_mode_does_not_update_estimates(self):
        conv = nn_core.make_conv1d(3, 4, 3, sn=True).eval()
        sn = conv.parametrizations.weight[0]
        u = sn.u.clone()
        _ = conv.weight
        assert torch.equal(sn.u, u)

    def test_training_mode_updates_estimates(self):
        conv = nn_core.make_conv1d(3, 4, 3, sn=True).train()
        with torch.no_grad():
            conv.parametrizations.weight.original.mul_(-1.0).add_(0.3)
        sn = conv.parametrizations.weight[0]
        u = sn.u.clone()
        _ = conv.weight
        assert not torch.equal(sn.u, u)


class TestLosses:
    def test_hinge_is_zero_at_the_margins(self):
        assert nn_core.hinge_d_loss(torch.ones(4), -torch.ones(4)).item() == 0.0
        assert nn_core.hinge_d_loss(torch.zeros(4), torch.zeros(4)).item() == 2.0
        assert nn_core.hinge_g_loss(torch.tensor([1.0, 3.0])).item() == -2.0

    def test_r1_of_a_linear_critic(self):
        a = randn(5)
        real = randn(3, 5, seed=1)
        penalty = nn_core.r1_penalty(lambda x: (x * a).sum(dim=1), real, gamma=10.0)
        assert penalty.item() == pytest.approx(5.0 * a.square().sum().item())

    def test_r1_is_differentiable_in_the_critic(self):
        a = randn(5).requires_grad_(True)
        penalty = nn_core.r1_penalty(lambda x: (x * a).sum(dim=1), randn(3, 5, seed=1), gamma=2.0)
        penalty.backward()
        torch.testing.assert_close(a.grad, 2.0 * a.detach())


class TestOptimizer:
    def test_frozen_parameters_are_skipped(self):
        m = torch.nn.Linear(3, 2)
        m.bias.requires_grad_(False)
        opt = nn_core.make_optimizer(m.parameters())
        assert len(opt.param_groups[0]["params"]) == 1
        assert opt.param_groups[0]["betas"] == (0.5, 0.999)

    def test_nan_gradient_is_refused(self):
        m = torch.nn.Linear(3, 2)
        opt = nn_core.make_optimizer(m.parameters())
        m(torch.full((1, 3), float("nan"))).sum().backward()
        with pytest.raises(NumericalError):
            nn_core.adam_step(opt)


class TestGradCheck:
    def test_windowed_operators(self):
        weight, bias = randn(6, 9, seed=3), randn(6, seed=4)
        err = nn_core.grad_check(
            lambda x, c, s: nn_core.sa_adain(x, c, s, weight, bias, window=3),
            [randn(1, 3, 8), randn(1, 4, 6, seed=1), randn(1, 5, seed=2)],
        )
        assert err < 1e-6

    def test_modules(self):
        sle = nn_core.SLE(3, 3, window=3).double()
        conv = nn_core.make_conv1d(3, 3, 3, sn=True).double()
        err = nn_core.grad_check(
            lambda x: sle(x, conv(x)),
            [randn(1, 3, 8)],
            [sle, conv],
        )
        assert err < 1e-6


class TestOrderedOperators:
    def test_conv_matches_library(self):
        x, w, b = randn(2, 5, 12), randn(4, 5, 3, seed=1), randn(4, seed=2)
        torch.testing.assert_close(nn_core.ordered_conv1d(x, w, b), torch.nn.functional.conv1d(x, w, b), rtol=0, atol=1e-12)

    def test_conv_chunks_output_channels(self, mocker):
        mocker.patch.object(nn_core, "ORDERED_CHUNK", 16)
        x, w, b = randn(1, 3, 9), randn(7, 3, 3, seed=1), randn(7, seed=2)
        torch.testing.assert_close(nn_core.ordered_conv1d(x, w, b), torch.nn.functional.conv1d(x, w, b), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_conv_is_exact_under_cropping(self, dtype):
        x = randn(3, 7, 40).to(dtype)
        w, b = randn(5, 7, 3, seed=1).to(dtype), randn(5, seed=2).to(dtype)
        full = nn_core.ordered_conv1d(x, w, b)
        for s in range(1, 20):
            assert torch.equal(nn_core.ordered_conv1d(x[..., s:s + 9], w, b), full[..., s:s + 7])

    def test_conv_shape_errors(self):
        with pytest.raises(ShapeError):
            nn_core.ordered_conv1d(randn(1, 2, 10), randn(4, 3, 3))
        with pytest.raises(ShapeError):
            nn_core.ordered_conv1d(randn(1, 3, 2), randn(4, 3, 3))

    def test_exp_matches_library(self):
        x = torch.linspace(-50.0, 50.0, 10001, dtype=torch.float64)
        torch.testing.assert_close(nn_core.ordered_exp(x), torch.exp(x), rtol=1e-14, atol=0)

    def test_exp_saturates_instead_of_overflowing(self):
        out = nn_core.ordered_exp(torch.tensor([-1e4, 1e4], dtype=torch.float32))
        assert torch.isfinite(out).all()
        assert out[0].item() >= 0.0

    def test_tanh_and_sigmoid_match_library(self):
        x = torch.linspace(-30.0, 30.0, 6001, dtype=torch.float64)
        torch.testing.assert_close(nn_core.ordered_tanh(x), torch.tanh(x), rtol=0, atol=2e-15)
        torch.testing.assert_close(nn_core.ordered_sigmoid(x), torch.sigmoid(x), rtol=1e-14, atol=1e-300)
        assert nn_core.ordered_tanh(torch.tensor([-1e3, 1e3])).tolist() == [-1.0, 1.0]

    def test_window_mean(self):
        x = randn(2, 3, 10)
        torch.testing.assert_close(
            nn_core.window_mean(x, 4), torch.nn.functional.avg_pool1d(x, 4, stride=1), rtol=0, atol=1e-14
        )
        with pytest.raises(ShapeError):
            nn_core.window_mean(x, 11)


class TestSpectralNormOracles:
    def test_diagonal_matrix(self):
        w = torch.diag(torch.tensor([3.0, 1.0], dtype=torch.float64))
        u = torch.nn.functional.normalize(torch.tensor([1.0, 1.0], dtype=torch.float64), dim=0)
        normed, _, _, sigma = nn_core.spectral_norm_apply(w, u, n_power_iterations=20)
        assert sigma.item() == pytest.approx(3.0, abs=1e-4)
        assert torch.linalg.matrix_norm(normed, ord=2).item() == pytest.approx(1.0, abs=1e-4)

    def test_orthogonal_matrix(self):
        q, _ = torch.linalg.qr(randn(5, 5, seed=7))
        u = torch.nn.functional.normalize(randn(5, seed=8), dim=0)
        normed, _, _, sigma = nn_core.spectral_norm_apply(q, u, n_power_iterations=5)
        assert sigma.item() == pytest.approx(1.0, abs=1e-10)
        torch.testing.assert_close(normed, q)


class TestAdamOracle:
    def test_first_step_moves_by_the_learning_rate(self):
        p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
        opt = nn_core.make_optimizer([p])
        p.grad = torch.ones(3, dtype=torch.float64)
        nn_core.adam_step(opt)
        torch.testing.assert_close(p.detach(), torch.full((3,), -1e-4, dtype=torch.float64), rtol=0, atol=1e-8)


class TestOperatorGradients:
    @pytest.mark.parametrize(
        "name, fn, shapes",
        [
            ("conv1d", lambda x, w: nn_core.conv1d(x, w, stride=2, padding=1), [(1, 3, 9), (4, 3, 3)]),
            ("conv_transpose1d", lambda x, w: nn_core.conv_transpose1d(x, w, stride=2), [(1, 4, 5), (4, 3, 2)]),
            ("conv2d", lambda x, w: nn_core.conv2d(x, w, stride=2, padding=1), [(1, 2, 6, 6), (3, 2, 3, 3)]),
            ("tanh", nn_core.tanh, [(2, 7)]),
            ("sigmoid", nn_core.sigmoid, [(2, 7)]),
            ("leaky_relu", nn_core.leaky_relu, [(2, 7)]),
            ("ordered_conv1d", nn_core.ordered_conv1d, [(1, 3, 9), (4, 3, 3)]),
            ("ordered_tanh", nn_core.ordered_tanh, [(2, 7)]),
            ("ordered_sigmoid", nn_core.ordered_sigmoid, [(2, 7)]),
            ("window_mean", lambda x: nn_core.window_mean(x, 3), [(1, 2, 8)]),
            ("instance_norm", lambda x: nn_core.instance_norm(x, window=3), [(1, 2, 8)]),
        ],
    )
    def test_matches_finite_differences(self, name, fn, shapes):
        inputs = [randn(*shape, seed=i) for i, shape in enumerate(shapes)]
        assert nn_core.grad_check(fn, inputs) < 1e-6, name
