"""Small pre-norm ViT encoder that consumes patch-embedding tokens."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError


@dataclass
class BackboneConfig:
    embed_dim: int = 192
    depth: int = 4
    heads: int = 3
    mlp_ratio: float = 4.0
    num_classes: int = 16
    drop_path_rate: float = 0.1
    num_tokens: int = 9

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValidationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValidationError("depth must be >= 0")
        if not 0 <= self.drop_path_rate < 1:
            raise ValidationError("drop_path_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


def _trunc_normal(rng, shape, std=0.02):
    return truncnorm.rvs(-2, 2, scale=std, size=shape, random_state=rng)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    C, Hd = cfg.embed_dim, cfg.hidden_dim
    shapes: dict[str, tuple] = {
        "vit.cls": (1, C),
        "vit.pos": (cfg.num_tokens + 1, C),
    }
    for b in range(cfg.depth):
        p = f"vit.blocks.{b}."
        shapes.update({
            p + "norm1.g": (C,), p + "norm1.b": (C,),
            p + "attn.qkv.w": (C, 3 * C), p + "attn.qkv.b": (3 * C,),
            p + "attn.proj.w": (C, C), p + "attn.proj.b": (C,),
            p + "norm2.g": (C,), p + "norm2.b": (C,),
            p + "mlp.fc1.w": (C, Hd), p + "mlp.fc1.b": (Hd,),
            p + "mlp.fc2.w": (Hd, C), p + "mlp.fc2.b": (C,),
        })
    shapes.update({
        "vit.norm.g": (C,), "vit.norm.b": (C,),
        "vit.head.w": (C, cfg.num_classes), "vit.head.b": (cfg.num_classes,),
    })
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)
    return params


def attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
              return_weights: bool = False):
    """Multi-head self-attention on x (B, n, C)."""
    B, n, C = x.shape
    hd = C // heads
    qkv = ad.linear(x, params[prefix + "qkv.w"], params[prefix + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (B, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    weights = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(weights, v)  # (B, h, n, hd)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (B, n, C))
    out = ad.linear(mixed, params[prefix + "proj.w"], params[prefix + "proj.b"])
    if return_weights:
        return out, weights
    return out


def _drop_path(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(x.dtype) / keep
    return ad.scale_rows(x, mask)


def block(x: Tensor, params: dict[str, Tensor], b: int, cfg: BackboneConfig, dpr: float,
          train: bool, rng) -> Tensor:
    p = f"vit.blocks.{b}."
    h = ad.layernorm(x, params[p + "norm1.g"], params[p + "norm1.b"])
    x = ad.add(x, _drop_path(attention(h, params, p + "attn.", cfg.heads), dpr, train, rng))
    h = ad.layernorm(x, params[p + "norm2.g"], params[p + "norm2.b"])
    h = ad.gelu(ad.linear(h, params[p + "mlp.fc1.w"], params[p + "mlp.fc1.b"]))
    h = ad.linear(h, params[p + "mlp.fc2.w"], params[p + "mlp.fc2.b"])
    return ad.add(x, _drop_path(h, dpr, train, rng))


def forward(tokens: Tensor, cfg: BackboneConfig, params: dict[str, Tensor], train: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """tokens (B, N, C) -> logits (B, num_classes); a 2-D input gives 1-D logits."""
    single = tokens.ndim == 2
    if single:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    B, N, C = tokens.shape
    if N != cfg.num_tokens or C != cfg.embed_dim:
        raise DimensionError(f"tokens {tokens.shape[1:]} != ({cfg.num_tokens}, {cfg.embed_dim})")
    cls = ad.expand(params["vit.cls"], B)  # (B, 1, C)
    x = ad.concat([cls, tokens], axis=1)
    x = ad.add(x, ad.expand(params["vit.pos"], B))
    # stochastic depth rate grows linearly with block index
    rates = np.linspace(0, cfg.drop_path_rate, cfg.depth) if cfg.depth else []
    for b in range(cfg.depth):
        x = block(x, params, b, cfg, float(rates[b]), train, rng)
    x = ad.layernorm(x, params["vit.norm.g"], params["vit.norm.b"])
    logits = ad.linear(x[:, 0], params["vit.head.w"], params["vit.head.b"])
    return logits[0] if single else logits
