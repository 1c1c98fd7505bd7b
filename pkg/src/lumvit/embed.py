"""Kernel-level binarized patch embedding.

Each of the C kernels is a K x K spatial pattern shared by every spectral
channel, followed by a per-kernel spectral weight vector. In binarized mode
the pattern is ``s_i * step(w_i)``, with ``step(w) = 1`` for ``w >= 0`` and
``s_i`` the mean of ``max(0, w_i)`` over the kernel.

Latent weights are stored kernel-major as (C, K, K).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError

FULL_PRECISION = "full_precision"
BINARIZED = "binarized"
MODES = (FULL_PRECISION, BINARIZED)

STE_CLIP = 1.0


def step(w: np.ndarray) -> np.ndarray:
    return (np.asarray(w) >= 0).astype(np.uint8)


def binarize_weights(W: np.ndarray, layer_level: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W_b, s)`` for latent weights of shape (C, K, K).

    With ``layer_level`` every kernel gets the same scale, the mean of the
    per-kernel scales.
    """
    W = np.asarray(W)
    if W.ndim != 3:
        raise DimensionError(f"weights must be (C, K, K), got {W.shape}")
    C, K, _ = W.shape
    wb = step(W)
    s = np.maximum(W, 0).reshape(C, -1).sum(axis=1) / (K * K)
    if layer_level:
        s = np.full(C, s.mean(), dtype=s.dtype)
    return wb, s


def binarized_kernels(W: Tensor, layer_level: bool = False, ste: bool = True) -> Tensor:
    """Effective kernels ``s_i * step(w_i)`` as a differentiable op.

    Backward: the scale path is exact (``ds_i/dw = 1/K^2`` on positive
    entries). The step path uses a straight-through estimator clipped to
    ``|w| <= 1``; ``ste=False`` drops that path entirely.
    """
    w = W.data
    C, K, _ = w.shape
    P = K * K
    wb, s = binarize_weights(w, layer_level)
    wb = wb.astype(w.dtype)
    s = s.astype(w.dtype)
    theta = s[:, None, None] * wb
    pos = (w > 0).astype(w.dtype)
    clip = (np.abs(w) <= STE_CLIP).astype(w.dtype)

    def backward(g):
        # dL/ds_i = sum_jk g_ijk * wb_ijk
        gs = (g * wb).reshape(C, -1).sum(axis=1)
        if layer_level:
            gs = np.full(C, gs.sum() / C, dtype=w.dtype)
        gw = gs[:, None, None] * pos / P
        if ste:
            gw = gw + g * s[:, None, None] * clip
        W._accumulate(gw)

    return Tensor.from_op(theta, (W,), backward, "binarize")


def extract_patches(images: np.ndarray, K: int) -> np.ndarray:
    """(B, H, W, C_h) -> (B, N, K*K*C_h), patches in row-major grid order,
    entries ordered (row, col, channel)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    B, H, W, ch = images.shape
    if H % K or W % K:
        raise DimensionError(f"image {H}x{W} is not divisible by patch size {K}")
    gh, gw = H // K, W // K
    x = images.reshape(B, gh, K, gw, K, ch).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, gh * gw, K * K * ch))


def spectral_outer(theta: Tensor, V: Tensor) -> Tensor:
    """Per-kernel outer product: (C, P) x (C, C_h) -> (C, P*C_h)."""
    C, P = theta.shape
    ch = V.shape[1]
    if V.shape[0] != C:
        raise DimensionError(f"{C} kernels but {V.shape[0]} spectral vectors")
    out = (theta.data[:, :, None] * V.data[:, None, :]).reshape(C, P * ch)

    def backward(g):
        g3 = g.reshape(C, P, ch)
        if theta.requires_grad:
            theta._accumulate(np.einsum("jpc,jc->jp", g3, V.data))
        if V.requires_grad:
            V._accumulate(np.einsum("jpc,jp->jc", g3, theta.data))

    return Tensor.from_op(out, (theta, V), backward, "spectral_outer")


@dataclass
class EmbedParams:
    W: Tensor  # latent kernel weights, (C, K, K)
    V: Tensor  # spectral weights, (C, C_h)
    mode: str = FULL_PRECISION
    layer_level: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"embed mode must be one of {MODES}")
        if self.W.ndim != 3 or self.V.ndim != 2 or self.W.shape[0] != self.V.shape[0]:
            raise DimensionError(f"W {self.W.shape} and V {self.V.shape} disagree")

    @property
    def num_kernels(self) -> int:
        return self.W.shape[0]

    @property
    def patch(self) -> int:
        return self.W.shape[1]

    @property
    def bands(self) -> int:
        return self.V.shape[1]

    def effective_kernels(self) -> Tensor:
        if self.mode == BINARIZED:
            return binarized_kernels(self.W, self.layer_level)
        return self.W


def init_embed(num_kernels: int, patch: int, bands: int, rng: np.random.Generator,
               dtype=np.float32) -> EmbedParams:
    W = rng.standard_normal((num_kernels, patch, patch)) / patch
    V = rng.standard_normal((num_kernels, bands)) / np.sqrt(bands)
    return EmbedParams(Tensor(W.astype(dtype), requires_grad=True, name="embed.W"),
                       Tensor(V.astype(dtype), requires_grad=True, name="embed.V"))


def embed_from_kernels(patches: np.ndarray | Tensor, theta: Tensor, V: Tensor) -> Tensor:
    """Y[b, i, j] = sum_{p, c} theta[j, p] * x[b, i, p, c] * V[j, c]."""
    C = theta.shape[0]
    M = spectral_outer(ad.reshape(theta, (C, -1)), V)
    if not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches, dtype=theta.dtype))
    if patches.shape[-1] != M.shape[1]:
        raise DimensionError(f"patch length {patches.shape[-1]} != kernel length {M.shape[1]}")
    return ad.matmul(patches, ad.transpose(M))


def embed_forward(images: np.ndarray, params: EmbedParams) -> Tensor:
    """Patch-embedding output Y, shape (B, N, C) (or (N, C) for one image)."""
    images = np.asarray(images)
    single = images.ndim == 3
    if images.shape[-1] != params.bands:
        raise DimensionError(f"image has {images.shape[-1]} bands, embed expects {params.bands}")
    patches = extract_patches(images, params.patch).astype(params.W.dtype, copy=False)
    Y = embed_from_kernels(patches, params.effective_kernels(), params.V)
    return Y[0] if single else Y
