"""Model assembly: front end (embed + mask) feeding the ViT backbone.

``kind`` selects the front end:

- ``lum``: full kernel bank + learnable Gumbel mask
- ``du``: reduced kernel bank + 1x1 mix + LayerNorm, no mask
- ``random`` / ``mag``: full kernel bank + a fixed mask set after stage 1
- ``cs``: plain dense embed over CS-reconstructed inputs
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import Tensor
from .baselines import DuVitEmbedParams, du_vit_mix, init_du_vit
from .dmd import BinaryKernelBank, NoiseModel, acquire_batch, apply_noise_batch
from .embed import BINARIZED, FULL_PRECISION, EmbedParams, embed_forward, init_embed
from .errors import DimensionError, ValidationError
from .mask import (FixedMask, MaskState, apply_mask, compute_probs, export_fixed_mask,
                   init_mask_state, sample_mask)

KINDS = ("lum", "du", "random", "mag", "cs")


@dataclass
class ModelConfig:
    kind: str = "lum"
    bands: int = 200
    num_classes: int = 16
    image_size: int = 27
    patch: int = 9
    embed_dim: int = 192
    depth: int = 4
    heads: int = 3
    mlp_ratio: float = 4.0
    drop_path: float = 0.1
    d_tar: float = 0.1
    use_linear: bool = True
    use_token: bool = True
    layer_level_bi: bool = False
    tau: float = 1.0
    shared_mask: bool = False
    z_std: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}")
        if self.image_size % self.patch:
            raise DimensionError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if not 0 < self.d_tar <= 1:
            raise ValidationError(f"d_tar must lie in (0, 1], got {self.d_tar}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    def backbone(self) -> vit.BackboneConfig:
        return vit.BackboneConfig(self.embed_dim, self.depth, self.heads, self.mlp_ratio,
                                  self.num_classes, self.drop_path, self.num_tokens)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Model:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        C, K, N = cfg.embed_dim, cfg.patch, cfg.num_tokens
        self.du: DuVitEmbedParams | None = None
        if cfg.kind == "du":
            self.du = init_du_vit(cfg.d_tar, C, K, cfg.bands, rng, dtype)
            self.embed = self.du.embed
        else:
            self.embed = init_embed(C, K, cfg.bands, rng, dtype)
        self.embed.layer_level = cfg.layer_level_bi
        self.mask: MaskState | None = None
        if cfg.kind == "lum":
            self.mask = init_mask_state(N, C, rng, dtype, z_std=cfg.z_std, tau=cfg.tau,
                                        use_linear=cfg.use_linear, use_token=cfg.use_token)
            self.fill = self.mask.fill
        else:
            # fixed-mask baselines keep their fill token trainable after the mask is set
            self.fill = Tensor(np.zeros(C, dtype=dtype), requires_grad=True, name="fixed.fill")
        self.fixed: FixedMask | None = None
        self.backbone_cfg = cfg.backbone()
        self.backbone = vit.init_backbone(self.backbone_cfg, rng, dtype)

    # parameters ---------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        if self.du is not None:
            params.update(self.du.parameters())
        else:
            params["embed.W"] = self.embed.W
            params["embed.V"] = self.embed.V
        if self.mask is not None:
            params.update(self.mask.parameters())
        elif self.cfg.kind in ("random", "mag"):
            params["fixed.fill"] = self.fill
        params.update(self.backbone)
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every stored tensor, including ones not currently trained."""
        out = {name: t.data for name, t in self.parameters().items()}
        if self.mask is not None:
            for name, t in (("mask.lin_w", self.mask.lin_w), ("mask.lin_b", self.mask.lin_b)):
                out.setdefault(name, t.data)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        targets = self.parameters()
        if self.mask is not None:
            targets.setdefault("mask.lin_w", self.mask.lin_w)
            targets.setdefault("mask.lin_b", self.mask.lin_b)
        missing = set(targets) - set(arrays)
        if missing:
            raise ValidationError(f"missing tensors: {sorted(missing)}")
        for name, t in targets.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: stored {arr.shape}, model {t.shape}")
            t.data = np.array(arr, dtype=self.dtype, copy=True)

    def astype(self, dtype) -> "Model":
        """Independent copy with every tensor cast to ``dtype``."""
        clone = Model.__new__(Model)
        clone.__dict__.update(self.__dict__)
        clone.dtype = np.dtype(dtype)

        def cp(t: Tensor) -> Tensor:
            return Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)

        clone.embed = EmbedParams(cp(self.embed.W), cp(self.embed.V), self.embed.mode, self.embed.layer_level)
        if self.du is not None:
            clone.du = DuVitEmbedParams(clone.embed, cp(self.du.mix_w), cp(self.du.mix_b),
                                        cp(self.du.norm_g), cp(self.du.norm_b))
        if self.mask is not None:
            m = self.mask
            clone.mask = MaskState(cp(m.z), cp(m.lin_w), cp(m.lin_b), cp(m.fill), m.tau,
                                   m.use_linear, m.use_token, m.frozen)
            clone.fill = clone.mask.fill
        else:
            clone.fill = cp(self.fill)
        clone.backbone = {k: cp(v) for k, v in self.backbone.items()}
        return clone

    # mode ---------------------------------------------------------------
    @property
    def embed_mode(self) -> str:
        return self.embed.mode

    def set_embed_mode(self, mode: str) -> None:
        if mode not in (FULL_PRECISION, BINARIZED):
            raise ValidationError(f"unknown embed mode {mode}")
        self.embed.mode = mode

    @property
    def use_token(self) -> bool:
        return self.cfg.use_token

    # mask helpers -------------------------------------------------------
    def probs(self) -> np.ndarray:
        if self.mask is None:
            raise ValidationError(f"'{self.cfg.kind}' model has no learnable mask")
        with ad.no_grad():
            return compute_probs(self.mask).data

    def export_mask(self, d_tar: float | None = None) -> FixedMask:
        """Deployment mask: top-k of the retain probabilities for ``lum``,
        the stored mask for ``random``/``mag``, all-ones otherwise."""
        if self.mask is not None:
            return export_fixed_mask(self.probs(), self.cfg.d_tar if d_tar is None else d_tar)
        if self.fixed is not None:
            return self.fixed
        return FixedMask(np.ones((self.cfg.num_tokens, self.embed.num_kernels), dtype=bool))

    def kernel_bank(self) -> BinaryKernelBank:
        return BinaryKernelBank.from_weights(self.embed.W.data.astype(np.float64),
                                             self.embed.V.data.astype(np.float64), self.embed.layer_level)

    # forward ------------------------------------------------------------
    def embed_tokens(self, images: np.ndarray) -> Tensor:
        """Raw patch-embedding output before masking, (B, N, C_kernels)."""
        return embed_forward(images, self.embed)

    def front_end(self, images: np.ndarray, mask_mode: str = "auto", train: bool = False,
                  rng: np.random.Generator | None = None, fixed: FixedMask | None = None,
                  tau: float | None = None):
        """Tokens for the backbone and the mask used, ``(tokens, D)``.

        ``mask_mode``: ``sample`` (Gumbel, lum only), ``fixed``, ``dense``
        or ``auto`` (sample when training a lum model, fixed otherwise).
        """
        Y = self.embed_tokens(images)
        if self.du is not None:
            return du_vit_mix(Y, self.du), None
        if mask_mode == "auto":
            if self.mask is not None:
                mask_mode = "sample" if train and not self.mask.frozen else "fixed"
            else:
                mask_mode = "fixed" if self.fixed is not None else "dense"
        if mask_mode == "dense":
            return Y, None
        if mask_mode == "sample":
            if self.mask is None:
                raise ValidationError("sampling needs a learnable mask")
            pi = compute_probs(self.mask)
            t = self.mask.tau if tau is None else tau
            batch = None if self.cfg.shared_mask else Y.shape[0]
            D = sample_mask(pi, t, rng, batch=batch)
            return apply_mask(Y, D, self.fill, self.use_token), D
        if mask_mode == "fixed":
            fm = fixed if fixed is not None else self.export_mask()
            return apply_mask(Y, fm.D, self.fill, self.use_token), fm.D
        raise ValidationError(f"unknown mask mode {mask_mode}")

    def forward(self, images: np.ndarray, train: bool = False, rng: np.random.Generator | None = None,
                mask_mode: str = "auto", fixed: FixedMask | None = None, tau: float | None = None):
        tokens, D = self.front_end(images, mask_mode, train, rng, fixed, tau)
        cfg = self.backbone_cfg
        return vit.forward(tokens, cfg, self.backbone, train=train, rng=rng), D

    def forward_dmd(self, images: np.ndarray, bank: BinaryKernelBank | None = None,
                    fixed: FixedMask | None = None, fill: np.ndarray | None = None,
                    noise: NoiseModel | None = None, rng: np.random.Generator | None = None,
                    counter=None) -> Tensor:
        """Inference through the simulated DMD: only retained entries are
        acquired; the fill token is substituted at the rest."""
        bank = bank if bank is not None else self.kernel_bank()
        fm = fixed if fixed is not None else self.export_mask()
        Y = acquire_batch(images, bank, fm.D, counter)
        if noise is not None:
            Y = apply_noise_batch(Y, fm.D, noise, rng)
        Yt = Tensor(Y.astype(self.dtype))
        if self.du is not None:
            tokens = du_vit_mix(Yt, self.du)
        else:
            fill_t = self.fill if fill is None else Tensor(np.asarray(fill, dtype=self.dtype))
            tokens = apply_mask(Yt, fm.D, fill_t, self.use_token)
        return vit.forward(tokens, self.backbone_cfg, self.backbone, train=False)
