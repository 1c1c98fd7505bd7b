import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lumvit import autodiff as ad
from lumvit.autodiff import Tensor
from lumvit.embed import (BINARIZED, STE_CLIP, EmbedParams, binarize_weights, binarized_kernels,
                          embed_forward, extract_patches, init_embed)
from lumvit.errors import DimensionError


def brute_embed(image, theta, V, K):
    """Direct sum over every patch, kernel, pixel and band."""
    H, W, ch = image.shape
    g = W // K
    N = (H // K) * g
    C = theta.shape[0]
    Y = np.zeros((N, C))
    for i in range(N):
        r, c = (i // g) * K, (i % g) * K
        for j in range(C):
            acc = 0.0
            for a in range(K):
                for b in range(K):
                    for h in range(ch):
                        acc += theta[j, a, b] * image[r + a, c + b, h] * V[j, h]
            Y[i, j] = acc
    return Y


class TestBinarize:
    def test_scale_is_mean_positive_part(self):
        W = np.array([[[1.0, -2.0], [3.0, 0.0]]])
        wb, s = binarize_weights(W)
        np.testing.assert_array_equal(wb, [[[1, 0], [1, 1]]])
        assert s[0] == pytest.approx((1 + 3) / 4)

    def test_zero_counts_as_on(self):
        wb, _ = binarize_weights(np.zeros((1, 3, 3)))
        assert wb.all()

    def test_layer_level_shares_one_scale(self):
        W = np.random.default_rng(0).standard_normal((5, 3, 3))
        _, s_k = binarize_weights(W)
        _, s_l = binarize_weights(W, layer_level=True)
        np.testing.assert_allclose(s_l, s_k.mean())

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 4, 4), elements=st.floats(-5, 5)))
    def test_effective_kernel_takes_two_values(self, W):
        theta = binarized_kernels(Tensor(W)).data
        _, s = binarize_weights(W)
        for j in range(3):
            assert set(np.unique(theta[j])) <= {0.0, s[j]}

    def test_wrong_rank(self):
        with pytest.raises(DimensionError):
            binarize_weights(np.zeros((3, 3)))


class TestSte:
    def test_gradient_is_s_path_plus_clipped_passthrough(self):
        rng = np.random.default_rng(3)
        W = Tensor(rng.standard_normal((2, 3, 3)) * 1.2, requires_grad=True)
        g = rng.standard_normal((2, 3, 3))
        out = binarized_kernels(W)
        ad.tsum(ad.mul(out, Tensor(g))).backward()
        wb, s = binarize_weights(W.data)
        P = 9
        gs = (g * wb).reshape(2, -1).sum(axis=1)
        expect = gs[:, None, None] * (W.data > 0) / P
        expect += g * s[:, None, None] * (np.abs(W.data) <= STE_CLIP)
        np.testing.assert_allclose(W.grad, expect, atol=1e-14)

    def test_clip_zeroes_passthrough_beyond_one(self):
        W = Tensor(np.full((1, 2, 2), -3.0), requires_grad=True)
        ad.tsum(binarized_kernels(W)).backward()
        # all weights negative: s = 0 and outside the clip window
        np.testing.assert_array_equal(W.grad, 0.0)


class TestEmbedForward:
    def test_patch_order_is_row_major(self):
        img = np.arange(4 * 4 * 1, dtype=float).reshape(1, 4, 4, 1)
        p = extract_patches(img, 2)
        assert p.shape == (1, 4, 4)
        np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        K, C, ch = 3, 4, 2
        img = rng.standard_normal((6, 6, ch))
        params = init_embed(C, K, ch, rng, np.float64)
        Y = embed_forward(img, params).data
        np.testing.assert_allclose(Y, brute_embed(img, params.W.data, params.V.data, K), rtol=1e-12)

    def test_binarized_mode_uses_two_valued_kernels(self):
        rng = np.random.default_rng(12)
        K, C, ch = 3, 3, 2
        img = rng.standard_normal((3, 6, ch))
        params = init_embed(C, K, ch, rng, np.float64)
        params.mode = BINARIZED
        wb, s = binarize_weights(params.W.data)
        theta = wb * s[:, None, None]
        np.testing.assert_allclose(embed_forward(img, params).data, brute_embed(img, theta, params.V.data, K),
                                   rtol=1e-12)

    def test_band_mismatch(self):
        params = init_embed(2, 3, 4, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            embed_forward(np.zeros((3, 3, 5)), params)

    def test_params_shape_check(self):
        with pytest.raises(DimensionError):
            EmbedParams(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((3, 4))))
