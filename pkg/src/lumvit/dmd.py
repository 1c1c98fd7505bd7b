"""Simulated DMD acquisition of patch-embedding outputs.

A DMD operation displays one K x K binary pattern over one image patch and
returns the pattern-weighted spatial sum for every spectral channel, scaled
by the kernel's coefficient. A retained embedding entry ``(i, j)`` costs
exactly one operation; bypassed entries cost nothing and read as zero.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

if os.environ.get("LUMVIT_FORCE_PYTHON") == "1":
    from . import _dmd_py as _impl
else:
    try:
        from . import _dmd_core as _impl
    except ImportError:  # extension not built
        from . import _dmd_py as _impl

BACKEND = "cython" if _impl.__name__.endswith("_dmd_core") else "python"


@dataclass(frozen=True)
class BinaryPattern:
    bits: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise DimensionError(f"pattern must be K x K, got {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValidationError("pattern bits must be 0 or 1")
        if not self.scale >= 0:
            raise ValidationError(f"pattern scale must be >= 0, got {self.scale}")
        object.__setattr__(self, "bits", bits.astype(np.uint8))


@dataclass
class BinaryKernelBank:
    """C binary patterns with scales and spectral weight vectors."""

    bits: np.ndarray  # (C, K, K) uint8
    scales: np.ndarray  # (C,)
    spectral: np.ndarray  # (C, C_h)

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64)
        self.spectral = np.ascontiguousarray(self.spectral, dtype=np.float64)
        if self.bits.ndim != 3 or self.bits.shape[1] != self.bits.shape[2]:
            raise DimensionError(f"bits must be (C, K, K), got {self.bits.shape}")
        if np.any(self.bits > 1):
            raise ValidationError("bits must be 0 or 1")
        if np.any(self.scales < 0):
            raise ValidationError("scales must be nonnegative")
        C = self.bits.shape[0]
        if self.scales.shape != (C,) or self.spectral.ndim != 2 or self.spectral.shape[0] != C:
            raise DimensionError("bank needs one scale and one spectral vector per pattern")

    @property
    def num_kernels(self) -> int:
        return self.bits.shape[0]

    @property
    def patch(self) -> int:
        return self.bits.shape[1]

    @property
    def bands(self) -> int:
        return self.spectral.shape[1]

    @classmethod
    def from_weights(cls, W: np.ndarray, V: np.ndarray, layer_level: bool = False) -> "BinaryKernelBank":
        """Binarize latent weights ``W`` (C, K, K) into patterns and scales."""
        from .embed import binarize_weights

        bits, s = binarize_weights(np.asarray(W, dtype=np.float64), layer_level)
        return cls(bits, s, V)

    def pattern(self, j: int) -> BinaryPattern:
        return BinaryPattern(self.bits[j], float(self.scales[j]))


@dataclass
class AcquisitionResult:
    tokens: np.ndarray  # (N, C)
    validity: np.ndarray  # (N, C) bool
    op_count: int

    @property
    def d_ops(self) -> float:
        return self.op_count / self.validity.size


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "additive_gaussian"):
            raise ValidationError(f"unknown noise kind '{self.kind}'")
        if not self.sigma >= 0:
            raise ValidationError("noise sigma must be >= 0")


@dataclass
class OpCounter:
    """Running tally of simulated DMD operations."""

    count: int = 0
    history: list = field(default_factory=list)

    def add(self, n: int) -> None:
        self.count += int(n)
        self.history.append(int(n))


def dmd_apply(patch: np.ndarray, pattern: BinaryPattern) -> np.ndarray:
    patch = np.asarray(patch)
    K = pattern.bits.shape[0]
    if patch.ndim != 3 or patch.shape[:2] != (K, K):
        raise DimensionError(f"patch spatial dims {patch.shape[:2]} != pattern dims {(K, K)}")
    return _impl.dmd_apply(patch, pattern.bits, float(pattern.scale))


def _check_geometry(shape, K):
    H, W = shape[-3], shape[-2]
    if H % K or W % K:
        raise DimensionError(f"image {H}x{W} is not divisible by patch size {K}")
    return (H // K) * (W // K)


def acquire(image: np.ndarray, bank: BinaryKernelBank, mask: np.ndarray,
            counter: OpCounter | None = None) -> AcquisitionResult:
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"image must be H x W x C_h, got {image.shape}")
    N = _check_geometry(image.shape, bank.patch)
    if image.shape[2] != bank.bands:
        raise DimensionError(f"image has {image.shape[2]} bands, bank expects {bank.bands}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (N, bank.num_kernels):
        raise DimensionError(f"mask shape {mask.shape} != {(N, bank.num_kernels)}")
    Y, n = _impl.acquire(image, bank.bits, bank.scales, bank.spectral, mask.view(np.uint8))
    if counter is not None:
        counter.add(n)
    return AcquisitionResult(Y, mask.copy(), int(n))


def acquire_batch(images: np.ndarray, bank: BinaryKernelBank, mask: np.ndarray,
                  counter: OpCounter | None = None) -> np.ndarray:
    """Acquire a batch (B, H, W, C_h) under one shared mask; returns (B, N, C)."""
    images = np.asarray(images)
    N = _check_geometry(images.shape, bank.patch)
    if images.shape[-1] != bank.bands:
        raise DimensionError(f"images have {images.shape[-1]} bands, bank expects {bank.bands}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (N, bank.num_kernels):
        raise DimensionError(f"mask shape {mask.shape} != {(N, bank.num_kernels)}")
    Y, n = _impl.acquire_batch(images, bank.bits, bank.scales, bank.spectral, mask.view(np.uint8))
    if counter is not None:
        counter.add(n)
    return Y


def apply_noise(result: AcquisitionResult, model: NoiseModel, rng: np.random.Generator) -> AcquisitionResult:
    """Relative Gaussian perturbation of the retained entries."""
    if model.kind == "none" or model.sigma == 0:
        return AcquisitionResult(result.tokens.copy(), result.validity.copy(), result.op_count)
    tokens = result.tokens.copy()
    v = result.validity
    noise = rng.standard_normal(int(v.sum()))
    tokens[v] = tokens[v] + model.sigma * np.abs(tokens[v]) * noise
    return AcquisitionResult(tokens, v.copy(), result.op_count)


def apply_noise_batch(Y: np.ndarray, mask: np.ndarray, model: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    if model.kind == "none" or model.sigma == 0:
        return Y
    v = np.broadcast_to(np.asarray(mask, dtype=bool), Y.shape)
    out = Y.copy()
    out[v] = out[v] + model.sigma * np.abs(out[v]) * rng.standard_normal(int(v.sum()))
    return out
