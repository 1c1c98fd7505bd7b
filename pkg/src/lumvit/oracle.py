"""Finite-difference oracle suite: every differentiable op plus a toy
end-to-end LUM-ViT graph, all in float64.

Each case builds fresh random inputs from its own seeded generator, so the
suite is reproducible and the cases are independent.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import GradCheckEntry, GradCheckReport, Tensor, grad_check
from .baselines import du_vit_mix, init_du_vit
from .embed import binarized_kernels, embed_from_kernels, extract_patches, spectral_outer
from .mask import apply_mask, compute_probs, gumbel_noise, init_mask_state, ratio_loss, sample_mask
from .model import Model, ModelConfig

F64 = np.float64


def _p(rng, shape, name, scale=1.0, away_from_zero=False):
    x = rng.standard_normal(shape) * scale
    if away_from_zero:
        # keep kinks (relu, abs, step) out of the finite-difference stencil
        x = np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * (0.1 + np.abs(x)), x)
    return Tensor(x.astype(F64), requires_grad=True, name=name)


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalarize with fixed random weights so every output entry matters."""
    w = Tensor(rng.standard_normal(out.shape))
    return ad.tsum(ad.mul(out, w))


def _cases() -> dict[str, Callable[[np.random.Generator], tuple]]:
    """name -> builder(rng) returning (function, params)."""
    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @case("add")
    def _(rng):
        a, b = _p(rng, (3, 4), "a"), _p(rng, (3, 4), "b")
        return (lambda: _weighted(ad.add(a, b), np.random.default_rng(1))), [a, b]

    @case("add_broadcast_scalar")
    def _(rng):
        a, b = _p(rng, (3, 4), "a"), _p(rng, (), "b")
        return (lambda: _weighted(ad.add(a, b), np.random.default_rng(1))), [a, b]

    @case("sub")
    def _(rng):
        a, b = _p(rng, (5,), "a"), _p(rng, (5,), "b")
        return (lambda: _weighted(a - b, np.random.default_rng(1))), [a, b]

    @case("mul")
    def _(rng):
        a, b = _p(rng, (3, 4), "a"), _p(rng, (3, 4), "b")
        return (lambda: _weighted(ad.mul(a, b), np.random.default_rng(1))), [a, b]

    @case("mul_scalar_tensor")
    def _(rng):
        a, b = _p(rng, (3, 4), "a"), _p(rng, (), "b")
        return (lambda: _weighted(ad.mul(a, b), np.random.default_rng(1))), [a, b]

    @case("neg_scale")
    def _(rng):
        a = _p(rng, (6,), "a")
        return (lambda: _weighted(ad.scale(ad.neg(a), 2.5), np.random.default_rng(1))), [a]

    @case("div_scalar")
    def _(rng):
        a = _p(rng, (6,), "a")
        return (lambda: _weighted(a / 3.0, np.random.default_rng(1))), [a]

    @case("relu")
    def _(rng):
        a = _p(rng, (4, 5), "a", away_from_zero=True)
        return (lambda: _weighted(ad.relu(a), np.random.default_rng(1))), [a]

    @case("gelu")
    def _(rng):
        a = _p(rng, (4, 5), "a", 2.0)
        return (lambda: _weighted(ad.gelu(a), np.random.default_rng(1))), [a]

    @case("exp")
    def _(rng):
        a = _p(rng, (7,), "a")
        return (lambda: _weighted(ad.exp(a), np.random.default_rng(1))), [a]

    @case("log")
    def _(rng):
        a = Tensor(rng.uniform(0.2, 2.0, (7,)), requires_grad=True, name="a")
        return (lambda: _weighted(ad.log(a, clamp=1e-20), np.random.default_rng(1))), [a]

    @case("abs")
    def _(rng):
        a = _p(rng, (7,), "a", away_from_zero=True)
        return (lambda: _weighted(ad.absval(a), np.random.default_rng(1))), [a]

    @case("square")
    def _(rng):
        a = _p(rng, (7,), "a")
        return (lambda: _weighted(ad.square(a), np.random.default_rng(1))), [a]

    @case("scale_rows")
    def _(rng):
        a = _p(rng, (3, 2, 4), "a")
        f = np.array([0.0, 2.0, 0.5])
        return (lambda: _weighted(ad.scale_rows(a, f), np.random.default_rng(1))), [a]

    @case("sum_axis")
    def _(rng):
        a = _p(rng, (3, 4, 5), "a")
        return (lambda: _weighted(ad.tsum(a, axis=1), np.random.default_rng(1))), [a]

    @case("mean")
    def _(rng):
        a = _p(rng, (3, 4), "a")
        return (lambda: ad.mean(ad.square(a))), [a]

    @case("mean_axis")
    def _(rng):
        a = _p(rng, (3, 4), "a")
        return (lambda: _weighted(ad.mean(a, axis=0), np.random.default_rng(1))), [a]

    @case("reshape_transpose")
    def _(rng):
        a = _p(rng, (2, 3, 4), "a")
        return (lambda: _weighted(ad.transpose(ad.reshape(a, (6, 4)), (1, 0)),
                                  np.random.default_rng(1))), [a]

    @case("getitem")
    def _(rng):
        a = _p(rng, (4, 5), "a")
        idx = (np.array([0, 2, 2, 3]), slice(1, 4))
        return (lambda: _weighted(a[idx], np.random.default_rng(1))), [a]

    @case("concat")
    def _(rng):
        a, b = _p(rng, (2, 3), "a"), _p(rng, (2, 2), "b")
        return (lambda: _weighted(ad.concat([a, b], axis=1), np.random.default_rng(1))), [a, b]

    @case("expand")
    def _(rng):
        a = _p(rng, (2, 3), "a")
        return (lambda: _weighted(ad.expand(a, 4), np.random.default_rng(1))), [a]

    @case("matmul_shared_rhs")
    def _(rng):
        a, b = _p(rng, (2, 3, 4), "a"), _p(rng, (4, 5), "b")
        return (lambda: _weighted(ad.matmul(a, b), np.random.default_rng(1))), [a, b]

    @case("matmul_batched")
    def _(rng):
        a, b = _p(rng, (2, 3, 4), "a"), _p(rng, (2, 4, 5), "b")
        return (lambda: _weighted(ad.matmul(a, b), np.random.default_rng(1))), [a, b]

    @case("linear")
    def _(rng):
        x, w, b = _p(rng, (2, 3, 4), "x"), _p(rng, (4, 5), "w"), _p(rng, (5,), "b")
        return (lambda: _weighted(ad.linear(x, w, b), np.random.default_rng(1))), [x, w, b]

    @case("softmax")
    def _(rng):
        a = _p(rng, (3, 5), "a", 2.0)
        return (lambda: _weighted(ad.softmax(a, axis=-1), np.random.default_rng(1))), [a]

    @case("log_softmax")
    def _(rng):
        a = _p(rng, (3, 5), "a", 2.0)
        return (lambda: _weighted(ad.log_softmax(a, axis=-1), np.random.default_rng(1))), [a]

    @case("layernorm")
    def _(rng):
        x, g, b = _p(rng, (3, 6), "x"), _p(rng, (6,), "g"), _p(rng, (6,), "b")
        return (lambda: _weighted(ad.layernorm(x, g, b), np.random.default_rng(1))), [x, g, b]

    @case("cross_entropy_int")
    def _(rng):
        z = _p(rng, (4, 5), "logits")
        y = np.array([0, 3, 4, 1])
        return (lambda: ad.cross_entropy(z, y)), [z]

    @case("cross_entropy_soft")
    def _(rng):
        z = _p(rng, (4, 5), "logits")
        y = rng.dirichlet(np.ones(5), size=4)
        return (lambda: ad.cross_entropy(z, y)), [z]

    @case("binarized_kernels_s_path")
    def _(rng):
        # without the STE surrogate the op is piecewise smooth in W
        W = _p(rng, (4, 3, 3), "W", away_from_zero=True)
        return (lambda: _weighted(binarized_kernels(W, ste=False), np.random.default_rng(1))), [W]

    @case("binarized_kernels_layer_level")
    def _(rng):
        W = _p(rng, (4, 3, 3), "W", away_from_zero=True)
        return (lambda: _weighted(binarized_kernels(W, layer_level=True, ste=False),
                                  np.random.default_rng(1))), [W]

    @case("spectral_outer")
    def _(rng):
        th, V = _p(rng, (3, 4), "theta"), _p(rng, (3, 2), "V")
        return (lambda: _weighted(spectral_outer(th, V), np.random.default_rng(1))), [th, V]

    @case("patch_embed")
    def _(rng):
        images = rng.standard_normal((2, 6, 6, 2))
        W, V = _p(rng, (4, 3, 3), "W"), _p(rng, (4, 2), "V")
        patches = extract_patches(images, 3)
        return (lambda: _weighted(embed_from_kernels(patches, W, V), np.random.default_rng(1))), [W, V]

    @case("mask_probs")
    def _(rng):
        st = init_mask_state(3, 4, rng, F64)
        st.lin_w.data += rng.standard_normal((2, 2)) * 0.1
        return (lambda: _weighted(compute_probs(st), np.random.default_rng(1))), \
            [st.z, st.lin_w, st.lin_b]

    @case("gumbel_soft_sample")
    def _(rng):
        st = init_mask_state(3, 4, rng, F64)
        noise = gumbel_noise((2, 3, 4, 2), rng)
        return (lambda: _weighted(sample_mask(compute_probs(st), 0.7, None, batch=2, noise=noise, hard=False),
                                  np.random.default_rng(1))), [st.z, st.lin_w, st.lin_b]

    @case("apply_mask")
    def _(rng):
        Y, fill = _p(rng, (2, 3, 4), "Y"), _p(rng, (4,), "fill")
        # the fused op selects by D > 0; its D-gradient is the relaxed
        # Y*D + t*(1-D) one, checked separately in the mask tests
        Dh = (rng.random((2, 3, 4)) > 0.5).astype(F64)
        return (lambda: _weighted(apply_mask(Y, Dh, fill), np.random.default_rng(1))), [Y, fill]

    @case("ratio_loss_mse")
    def _(rng):
        D = Tensor(rng.uniform(0, 1, (3, 4, 5)), requires_grad=True, name="D")
        return (lambda: ratio_loss(D, 0.1, "mse")), [D]

    @case("ratio_loss_l1")
    def _(rng):
        D = Tensor(rng.uniform(0.5, 1, (3, 4, 5)), requires_grad=True, name="D")
        return (lambda: ratio_loss(D, 0.1, "l1")), [D]

    @case("du_vit_mix")
    def _(rng):
        du = init_du_vit(0.5, 6, 3, 2, rng, F64)
        Y = _p(rng, (2, 4, 3), "Y")
        ps = [Y, du.mix_w, du.mix_b, du.norm_g, du.norm_b]
        return (lambda: _weighted(du_vit_mix(Y, du), np.random.default_rng(1))), ps

    @case("attention")
    def _(rng):
        cfg = vit.BackboneConfig(8, 1, 2, 2.0, 3, 0.0, 4)
        params = vit.init_backbone(cfg, rng, F64)
        for p in params.values():
            p.data = p.data + rng.standard_normal(p.shape) * 0.3
        x = _p(rng, (2, 5, 8), "x")
        pre = "vit.blocks.0.attn."
        ps = [x] + [params[pre + k] for k in ("qkv.w", "qkv.b", "proj.w", "proj.b")]
        return (lambda: _weighted(vit.attention(x, params, pre, 2), np.random.default_rng(1))), ps

    return cases


def toy_model(seed: int = 0, mode: str = "full_precision") -> Model:
    """2 blocks, embed dim 8, 9 tokens (27 x 27 input, 9 x 9 patches)."""
    cfg = ModelConfig(kind="lum", bands=2, num_classes=3, image_size=27, patch=9, embed_dim=8,
                      depth=2, heads=2, mlp_ratio=2.0, drop_path=0.5, d_tar=0.3)
    model = Model(cfg, np.random.default_rng(seed), F64)
    prng = np.random.default_rng(seed + 1)
    for name, p in model.parameters().items():
        if name.startswith("vit.") or name.startswith("mask.lin"):
            p.data = p.data + prng.standard_normal(p.shape) * 0.2
    model.fill.data = prng.standard_normal(model.fill.shape)
    model.set_embed_mode(mode)
    return model


def toy_graph_case(seed: int = 0, mode: str = "full_precision"):
    """End-to-end loss of the toy model with all randomness frozen.

    The Gumbel noise and drop-path draws are fixed per call. In full
    precision the mask enters through its soft relaxation so the whole graph,
    mask logits included, is smooth; in binarized mode a fixed hard mask is
    used and the latent kernels are left to the op-level check (their STE
    gradient is a surrogate by design).
    """
    model = toy_model(seed, mode)
    rng = np.random.default_rng(seed + 2)
    images = rng.standard_normal((2, 27, 27, 2))
    targets = rng.dirichlet(np.ones(3), size=2)
    noise = gumbel_noise((2, 9, 8, 2), rng)
    D_hard = (rng.random((9, 8)) < 0.5).astype(F64)

    def f():
        Y = model.embed_tokens(images)
        if mode == "full_precision":
            D = sample_mask(compute_probs(model.mask), 1.0, None, batch=2, noise=noise, hard=False)
            tokens = ad.add(ad.mul(Y, D), ad.mul(ad.add(ad.neg(D), Tensor(np.ones(D.shape))),
                                                 ad.expand(ad.expand(model.fill, 9), 2)))
            extra = ratio_loss(D, model.cfg.d_tar)
        else:
            tokens = apply_mask(Y, D_hard, model.fill)
            extra = None
        logits = vit.forward(tokens, model.backbone_cfg, model.backbone, train=True,
                             rng=np.random.default_rng(seed + 3))
        loss = ad.cross_entropy(logits, targets)
        return loss if extra is None else ad.add(loss, ad.scale(extra, 5.0))

    params = dict(model.parameters())
    if mode != "full_precision":
        params.pop("embed.W")
        for k in [k for k in params if k.startswith("mask.") and k != "mask.fill"]:
            params.pop(k)
    return f, params


# structurally zero gradients (e.g. attention key bias) read as pure
# finite-difference roundoff, so tiny entries are judged on an absolute floor
SUITE_EPS = 1e-5
SUITE_FLOOR = 1e-5


def run_suite(seed: int = 0, eps: float = SUITE_EPS, tol: float = 1e-4, include_graph: bool = True,
              floor: float = SUITE_FLOOR) -> GradCheckReport:
    entries: list[GradCheckEntry] = []
    for i, (name, build) in enumerate(_cases().items()):
        fn, params = build(np.random.default_rng([seed, i]))
        rep = grad_check(fn, {f"{name}:{p.name}": p for p in params}, eps=eps, tol=tol, floor=floor)
        entries.extend(rep.entries)
    if include_graph:
        for mode in ("full_precision", "binarized"):
            fn, params = toy_graph_case(seed, mode)
            rep = grad_check(fn, {f"toy_lumvit[{mode}]:{k}": p for k, p in params.items()},
                             eps=eps, tol=tol, floor=floor)
            entries.extend(rep.entries)
    return GradCheckReport(entries, tol)


def case_names() -> list[str]:
    return list(_cases())
