import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lumvit import autodiff as ad
from lumvit.autodiff import Tensor, grad_check
from lumvit.errors import DimensionError, ValidationError
from lumvit.mask import (FixedMask, MaskState, apply_mask, compute_probs, d_ops, export_fixed_mask,
                         gumbel_noise, init_mask_state, ratio_loss, retained_count, sample_mask,
                         top_k_mask, total_loss)


def probs_for(p1, shape):
    pi = np.empty(shape + (2,))
    pi[..., 1] = p1
    pi[..., 0] = 1 - p1
    return Tensor(pi)


class TestProbs:
    def test_identity_affine_is_plain_softmax(self):
        st_ = init_mask_state(3, 4, np.random.default_rng(0), np.float64)
        pi = compute_probs(st_).data
        z = st_.z.data
        expect = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(pi, expect, rtol=1e-14)

    def test_without_linear_layer(self):
        st_ = init_mask_state(2, 2, np.random.default_rng(0), np.float64, use_linear=False)
        assert "mask.lin_w" not in st_.parameters()
        np.testing.assert_allclose(compute_probs(st_).data.sum(axis=-1), 1.0)

    def test_bad_shapes(self):
        with pytest.raises(DimensionError):
            MaskState(Tensor(np.zeros((2, 3))), Tensor(np.eye(2)), Tensor(np.zeros(2)), Tensor(np.zeros(3)))
        with pytest.raises(ValidationError):
            init_mask_state(2, 2, np.random.default_rng(0), tau=0.0)


class TestSampling:
    def test_hard_sample_is_binary(self):
        D = sample_mask(probs_for(0.4, (5, 6)), 1.0, np.random.default_rng(0), batch=3)
        assert D.shape == (3, 5, 6)
        assert set(np.unique(D.data)) <= {0.0, 1.0}

    def test_gradient_follows_soft_relaxation(self):
        rng = np.random.default_rng(1)
        z = Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True)
        noise = gumbel_noise((3, 4, 2), rng)
        w = rng.standard_normal((3, 4))

        hard = sample_mask(ad.softmax(z), 0.5, None, noise=noise)
        ad.tsum(ad.mul(hard, Tensor(w))).backward()
        g_hard = z.grad.copy()
        z.grad = None
        soft = sample_mask(ad.softmax(z), 0.5, None, noise=noise, hard=False)
        ad.tsum(ad.mul(soft, Tensor(w))).backward()
        np.testing.assert_allclose(g_hard, z.grad, rtol=1e-14)

    def test_hard_value_is_argmax_of_noisy_logits(self):
        rng = np.random.default_rng(2)
        pi = probs_for(rng.random((4, 4)), (4, 4))
        noise = gumbel_noise((4, 4, 2), rng)
        D = sample_mask(pi, 1.0, None, noise=noise).data
        noisy = np.log(pi.data) + noise
        np.testing.assert_array_equal(D, noisy.argmax(axis=-1))

    @pytest.mark.parametrize("p1", [0.1, 0.5, 0.9])
    def test_retain_frequency_monte_carlo(self, p1):
        D = sample_mask(probs_for(p1, (100, 100)), 1.0, np.random.default_rng(3)).data
        assert abs(D.mean() - p1) < 0.015

    def test_temperature_does_not_change_hard_distribution(self):
        pi = probs_for(0.3, (50, 50))
        a = sample_mask(pi, 0.1, np.random.default_rng(4)).data
        b = sample_mask(pi, 10.0, np.random.default_rng(4)).data
        np.testing.assert_array_equal(a, b)

    def test_zero_probability_never_retained(self):
        D = sample_mask(probs_for(0.0, (40, 40)), 1.0, np.random.default_rng(5)).data
        assert D.sum() == 0

    def test_noise_shape_checked(self):
        with pytest.raises(DimensionError):
            sample_mask(probs_for(0.5, (2, 2)), 1.0, None, noise=np.zeros((3, 2, 2)))


class TestApplyMask:
    def test_masked_entries_take_fill_value(self):
        rng = np.random.default_rng(6)
        Y = Tensor(rng.standard_normal((2, 3, 4)))
        fill = Tensor(rng.standard_normal(4))
        D = rng.random((3, 4)) < 0.5
        out = apply_mask(Y, D, fill).data
        np.testing.assert_array_equal(out[:, D], Y.data[:, D])
        np.testing.assert_array_equal(out[:, ~D], np.broadcast_to(fill.data, (2, 3, 4))[:, ~D])

    def test_no_token_gives_zeros(self):
        Y = Tensor(np.ones((3, 4)))
        out = apply_mask(Y, np.zeros((3, 4)), Tensor(np.ones(4)), use_token=False).data
        np.testing.assert_array_equal(out, 0.0)

    def test_d_gradient_matches_relaxed_form(self):
        """Fused op's D-gradient vs finite differences of Y*D + t*(1-D)."""
        rng = np.random.default_rng(7)
        Y = Tensor(rng.standard_normal((2, 3, 4)))
        fill = Tensor(rng.standard_normal(4))
        Dv = (rng.random((2, 3, 4)) < 0.5).astype(float)
        w = Tensor(rng.standard_normal((2, 3, 4)))
        D = Tensor(Dv.copy(), requires_grad=True, name="D")
        ad.tsum(ad.mul(apply_mask(Y, D, fill), w)).backward()
        t = Tensor(np.broadcast_to(fill.data, (2, 3, 4)).copy())
        D2 = Tensor(Dv.copy(), requires_grad=True, name="D")
        relaxed = lambda: ad.tsum(ad.mul(ad.add(ad.mul(Y, D2), ad.mul(t, ad.add(ad.neg(D2), Tensor(np.ones(Dv.shape))))), w))
        rep = grad_check(relaxed, [D2])
        np.testing.assert_allclose(D.grad, rep.entries[0].numeric, rtol=1e-7, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            apply_mask(Tensor(np.ones((3, 4))), np.ones((4, 3)), None)


class TestRatio:
    def test_d_ops_per_sample(self):
        D = np.zeros((2, 2, 5))
        D[0, 0, :] = 1
        np.testing.assert_allclose(d_ops(D), [0.5, 0.0])
        assert float(d_ops(D[0])) == 0.5

    def test_ratio_loss_value(self):
        D = Tensor(np.stack([np.ones((2, 5)), np.zeros((2, 5))]))
        assert ratio_loss(D, 0.1).item() == pytest.approx(((0.9 ** 2) + (0.1 ** 2)) / 2)
        assert ratio_loss(D, 0.1, "l1").item() == pytest.approx((0.9 + 0.1) / 2)

    def test_ratio_loss_zero_at_target(self):
        D = np.zeros((3, 4, 5))
        D[:, 0, :2] = 1  # 2 of 20
        assert ratio_loss(Tensor(D), 0.1).item() == 0.0

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
    def test_target_out_of_range(self, bad):
        with pytest.raises(ValidationError):
            ratio_loss(Tensor(np.ones((2, 2))), bad)

    def test_total_loss_weighting(self):
        out = total_loss(Tensor(1.0), Tensor(0.5), 5.0)
        assert out.item() == 3.5
        with pytest.raises(ValidationError):
            total_loss(Tensor(1.0), Tensor(0.5), -1.0)


class TestExport:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.floats(0.01, 1.0), st.integers(0, 10 ** 6))
    def test_exported_count(self, N, C, d_tar, seed):
        pi = probs_for(np.random.default_rng(seed).random((N, C)), (N, C)).data
        k = retained_count(d_tar, N * C)
        if k == 0:
            with pytest.raises(ValidationError):
                export_fixed_mask(pi, d_tar)
            return
        fm = export_fixed_mask(pi, d_tar)
        assert fm.retained == k == int(np.floor(d_tar * N * C + 0.5))
        # every retained probability is >= every dropped one
        p1 = pi[..., 1]
        if k < N * C:
            assert p1[fm.D].min() >= p1[~fm.D].max()

    def test_half_rounds_up(self):
        assert retained_count(0.5, 5) == 3
        assert retained_count(0.25, 10) == 3

    def test_ties_prefer_earlier_index(self):
        fm = top_k_mask(np.array([[0.5, 0.5], [0.5, 0.5]]), 3)
        np.testing.assert_array_equal(fm.D, [[True, True], [True, False]])

    def test_fixed_mask_read_only(self):
        fm = FixedMask(np.ones((2, 2)))
        with pytest.raises(ValueError):
            fm.D[0, 0] = False
        assert fm.rate == 1.0
