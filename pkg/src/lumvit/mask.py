"""Learnable under-sampling mask over the N x C patch-embedding outputs.

Trainable logits ``z`` (N, C, 2) pass through a shared 2 -> 2 affine map
and a softmax to give per-entry (bypass, retain) probabilities. Training
samples a hard 0/1 mask with the straight-through Gumbel-Softmax trick;
deployment exports a fixed top-k mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError

LOG_CLAMP = 1e-20
DEFAULT_LAMBDA_RATIO = 5.0


@dataclass
class MaskState:
    z: Tensor  # (N, C, 2)
    lin_w: Tensor  # (2, 2), applied as z @ lin_w + lin_b
    lin_b: Tensor  # (2,)
    fill: Tensor  # (C,)
    tau: float = 1.0
    use_linear: bool = True
    use_token: bool = True
    frozen: bool = False

    def __post_init__(self):
        if self.z.ndim != 3 or self.z.shape[2] != 2:
            raise DimensionError(f"z must be (N, C, 2), got {self.z.shape}")
        if not self.tau > 0:
            raise ValidationError("temperature must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape[0], self.z.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        params = {"mask.z": self.z, "mask.fill": self.fill}
        if self.use_linear:
            params["mask.lin_w"] = self.lin_w
            params["mask.lin_b"] = self.lin_b
        return params

    def freeze(self) -> None:
        self.frozen = True
        for t in (self.z, self.lin_w, self.lin_b, self.fill):
            t.requires_grad = False
            t.grad = None


def init_mask_state(num_tokens: int, num_kernels: int, rng: np.random.Generator,
                    dtype=np.float32, z_std: float = 0.5, **kwargs) -> MaskState:
    """Random logits, identity affine map, zero fill token."""
    z = rng.standard_normal((num_tokens, num_kernels, 2)) * z_std
    return MaskState(
        z=Tensor(z.astype(dtype), requires_grad=True, name="mask.z"),
        lin_w=Tensor(np.eye(2, dtype=dtype), requires_grad=True, name="mask.lin_w"),
        lin_b=Tensor(np.zeros(2, dtype=dtype), requires_grad=True, name="mask.lin_b"),
        fill=Tensor(np.zeros(num_kernels, dtype=dtype), requires_grad=True, name="mask.fill"),
        **kwargs,
    )


def compute_probs(state: MaskState) -> Tensor:
    """pi = softmax(linear(z)) over the last axis; pi[..., 1] is the retain probability."""
    logits = ad.linear(state.z, state.lin_w, state.lin_b) if state.use_linear else state.z
    return ad.softmax(logits, axis=-1)


def gumbel_noise(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    u = rng.random(shape)
    return (-np.log(-np.log(u + LOG_CLAMP) + LOG_CLAMP)).astype(dtype)


def sample_mask(pi: Tensor, tau: float, rng: np.random.Generator, batch: int | None = None,
                noise: np.ndarray | None = None, hard: bool = True) -> Tensor:
    """Straight-through Gumbel-Softmax sample of the retain decision.

    Returns D of shape (N, C), or (batch, N, C) with an independent draw per
    batch element. Forward values are exactly 0/1; gradients follow the soft
    relaxation ``softmax((log pi + g) / tau)[..., 1]``.
    """
    if not tau > 0:
        raise ValidationError("temperature must be > 0")
    if batch is not None:
        pi = ad.expand(pi, batch)
    if noise is None:
        noise = gumbel_noise(pi.shape, rng, pi.dtype)
    elif noise.shape != pi.shape:
        raise DimensionError(f"noise shape {noise.shape} != {pi.shape}")
    logits = ad.add(ad.log(pi, clamp=LOG_CLAMP), Tensor(noise.astype(pi.dtype)))
    soft = ad.softmax(ad.scale(logits, 1.0 / tau), axis=-1)
    retain = soft[..., 1]
    if not hard:
        return retain
    # argmax with ties to "bypass", same rule as np.argmax
    noisy = logits.data
    hard_val = (noisy[..., 1] > noisy[..., 0]).astype(pi.dtype)
    return ad.straight_through(hard_val, retain)


def apply_mask(Y: Tensor, D, fill: Tensor | None, use_token: bool = True) -> Tensor:
    """Y' = Y * D + fill * (1 - D), broadcasting ``fill`` (C,) over positions.

    ``D`` may be a Tensor (training, carries gradient) or a constant array
    of shape (N, C) or matching ``Y``.
    """
    d_t = D if isinstance(D, Tensor) else None
    d = (D.data if d_t is not None else np.asarray(D)).astype(Y.dtype)
    if d.shape != Y.shape:
        if d.shape != Y.shape[-2:]:
            raise DimensionError(f"mask shape {d.shape} vs tokens {Y.shape}")
        d = np.broadcast_to(d, Y.shape)
    C = Y.shape[-1]
    if use_token and fill is not None:
        if fill.shape != (C,):
            raise DimensionError(f"fill token shape {fill.shape} != ({C},)")
        t = np.broadcast_to(fill.data, Y.shape)
    else:
        t = np.zeros((), dtype=Y.dtype)
    # retained entries pass through untouched, masked ones become t exactly
    out = np.where(d > 0, Y.data, t).astype(Y.dtype)
    parents = [Y]
    if d_t is not None:
        parents.append(d_t)
    if use_token and fill is not None:
        parents.append(fill)

    def backward(g):
        if Y.requires_grad:
            Y._accumulate(g * d)
        if d_t is not None and d_t.requires_grad:
            gd = g * (Y.data - t)
            if gd.shape != d_t.shape:
                gd = gd.reshape((-1,) + d_t.shape).sum(axis=0)
            d_t._accumulate(gd)
        if use_token and fill is not None and fill.requires_grad:
            fill._accumulate((g * (1 - d)).reshape(-1, C).sum(axis=0))

    return Tensor.from_op(out, parents, backward, "apply_mask")


def d_ops(D) -> np.ndarray:
    """Achieved pass-through ratio per batch element (or scalar for one mask)."""
    d = D.data if isinstance(D, Tensor) else np.asarray(D)
    if d.ndim == 2:
        return np.asarray(d.sum() / d.size)
    return d.reshape(d.shape[0], -1).mean(axis=1)


def _check_target(d_tar: float) -> None:
    if not 0 < d_tar <= 1:
        raise ValidationError(f"d_tar must lie in (0, 1], got {d_tar}")


def ratio_loss(D: Tensor, d_tar: float, kind: str = "mse") -> Tensor:
    """(1/B) sum_b (d_tar - d_ops_b)^2 over per-sample masks D (B, N, C).

    ``kind="l1"`` uses |d_tar - d_ops_b| instead (ablation).
    """
    _check_target(d_tar)
    if D.ndim == 2:
        D = ad.reshape(D, (1,) + D.shape)
    B = D.shape[0]
    n = D.shape[1] * D.shape[2]
    rate = ad.scale(ad.tsum(ad.reshape(D, (B, n)), axis=1), 1.0 / n)
    diff = ad.add(ad.neg(rate), Tensor(np.asarray(d_tar, dtype=D.dtype)))
    if kind == "mse":
        per = ad.square(diff)
    elif kind == "l1":
        per = ad.absval(diff)
    else:
        raise ValidationError(f"unknown ratio loss '{kind}'")
    return ad.mean(per)


def total_loss(cls_loss: Tensor, ratio: Tensor, lambda_ratio: float = DEFAULT_LAMBDA_RATIO) -> Tensor:
    if lambda_ratio < 0:
        raise ValidationError("lambda_ratio must be >= 0")
    return ad.add(cls_loss, ad.scale(ratio, lambda_ratio))


@dataclass(frozen=True)
class FixedMask:
    D: np.ndarray  # (N, C) bool, read-only

    def __post_init__(self):
        d = np.array(self.D, dtype=bool, copy=True)
        if d.ndim != 2:
            raise DimensionError(f"fixed mask must be (N, C), got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "D", d)

    @property
    def rate(self) -> float:
        return float(self.D.sum()) / self.D.size

    @property
    def retained(self) -> int:
        return int(self.D.sum())


def top_k_mask(scores: np.ndarray, k: int) -> FixedMask:
    """Indicator of the k largest scores; ties go to the lexicographically
    earlier (i, j)."""
    scores = np.asarray(scores, dtype=np.float64)
    flat = scores.reshape(-1)
    if not 0 < k <= flat.size:
        raise ValidationError(f"k must be in [1, {flat.size}], got {k}")
    order = np.lexsort((np.arange(flat.size), -flat))
    D = np.zeros(flat.size, dtype=bool)
    D[order[:k]] = True
    return FixedMask(D.reshape(scores.shape))


def retained_count(d_tar: float, total: int) -> int:
    # round half away from zero, not numpy's banker's rounding
    return int(np.floor(d_tar * total + 0.5))


def export_fixed_mask(pi, d_tar: float) -> FixedMask:
    """Keep the round(d_tar * N * C) entries with the highest retain probability."""
    _check_target(d_tar)
    p = pi.data if isinstance(pi, Tensor) else np.asarray(pi)
    retain = p[..., 1]
    k = retained_count(d_tar, retain.size)
    if k == 0:
        raise ValidationError(f"d_tar={d_tar} retains no entries of a {retain.shape} mask")
    return top_k_mask(retain, k)
