"""Comparison methods: DU-ViT, random and magnitude masks, and compressed
sensing with orthogonal matching pursuit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Tensor
from .embed import EmbedParams, embed_forward, init_embed
from .errors import DegenerateError, DimensionError, ValidationError
from .mask import FixedMask, retained_count, top_k_mask

# ---------------------------------------------------------------------------
# DU-ViT: fewer kernels, then a 1x1 mix back up to C and a LayerNorm


@dataclass
class DuVitEmbedParams:
    embed: EmbedParams  # C' kernels
    mix_w: Tensor  # (C', C)
    mix_b: Tensor  # (C,)
    norm_g: Tensor  # (C,)
    norm_b: Tensor  # (C,)

    @property
    def reduced_kernels(self) -> int:
        return self.embed.num_kernels

    @property
    def embed_dim(self) -> int:
        return self.mix_w.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"embed.W": self.embed.W, "embed.V": self.embed.V, "du.mix.w": self.mix_w,
                "du.mix.b": self.mix_b, "du.norm.g": self.norm_g, "du.norm.b": self.norm_b}


def reduced_kernel_count(d_tar: float, num_kernels: int) -> int:
    c = retained_count(d_tar, num_kernels)
    if c < 1:
        raise ValidationError(f"d_tar={d_tar} leaves no kernels out of {num_kernels}")
    return c


def init_du_vit(d_tar: float, num_kernels: int, patch: int, bands: int, rng: np.random.Generator,
                dtype=np.float32) -> DuVitEmbedParams:
    c_red = reduced_kernel_count(d_tar, num_kernels)
    embed = init_embed(c_red, patch, bands, rng, dtype)
    mix = rng.standard_normal((c_red, num_kernels)) / np.sqrt(c_red)
    return DuVitEmbedParams(
        embed,
        Tensor(mix.astype(dtype), requires_grad=True, name="du.mix.w"),
        Tensor(np.zeros(num_kernels, dtype=dtype), requires_grad=True, name="du.mix.b"),
        Tensor(np.ones(num_kernels, dtype=dtype), requires_grad=True, name="du.norm.g"),
        Tensor(np.zeros(num_kernels, dtype=dtype), requires_grad=True, name="du.norm.b"),
    )


def du_vit_mix(Y_reduced: Tensor, params: DuVitEmbedParams) -> Tensor:
    h = ad.linear(Y_reduced, params.mix_w, params.mix_b)
    return ad.layernorm(h, params.norm_g, params.norm_b)


def du_vit_embed(images: np.ndarray, params: DuVitEmbedParams) -> Tensor:
    """Reduced binarizable conv (N * C' DMD ops) -> 1x1 mix to C -> LayerNorm."""
    return du_vit_mix(embed_forward(images, params.embed), params)


def du_vit_ops(num_tokens: int, params: DuVitEmbedParams) -> int:
    return num_tokens * params.reduced_kernels


# ---------------------------------------------------------------------------
# fixed-mask baselines


def random_mask(N: int, C: int, d_tar: float, rng: np.random.Generator) -> FixedMask:
    if not 0 < d_tar <= 1:
        raise ValidationError(f"d_tar must lie in (0, 1], got {d_tar}")
    k = retained_count(d_tar, N * C)
    D = np.zeros(N * C, dtype=bool)
    D[rng.choice(N * C, size=k, replace=False)] = True
    return FixedMask(D.reshape(N, C))


def magnitude_stats(embed_fn, batches) -> np.ndarray:
    """Mean |Y| per (patch, kernel) over an iterable of image batches."""
    total = None
    count = 0
    with ad.no_grad():
        for images in batches:
            Y = np.abs(np.asarray(embed_fn(images).data, dtype=np.float64))
            s = Y.sum(axis=0)
            total = s if total is None else total + s
            count += Y.shape[0]
    if not count:
        raise ValidationError("no training images given for magnitude statistics")
    return total / count


def magnitude_mask(stats: np.ndarray, d_tar: float) -> FixedMask:
    if not 0 < d_tar <= 1:
        raise ValidationError(f"d_tar must lie in (0, 1], got {d_tar}")
    stats = np.asarray(stats)
    return top_k_mask(stats, retained_count(d_tar, stats.size))


# ---------------------------------------------------------------------------
# compressed sensing


def dct_basis(K: int) -> np.ndarray:
    """Orthonormal 2-D DCT-II acting on row-major flattened K x K patches."""
    d1 = dct(np.eye(K), norm="ortho", axis=0)
    return np.kron(d1, d1)


@dataclass
class MeasurementEnsemble:
    phi: np.ndarray  # (m, n)
    psi: np.ndarray  # (n, n), orthonormal, s = psi @ x

    def __post_init__(self):
        m, n = self.phi.shape
        if self.psi.shape != (n, n):
            raise DimensionError(f"psi must be ({n}, {n}), got {self.psi.shape}")
        if m > n:
            raise ValidationError(f"m={m} exceeds n={n}")
        if not np.allclose(self.psi @ self.psi.T, np.eye(n), atol=1e-8):
            raise ValidationError("psi must be orthonormal")

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    @property
    def dictionary(self) -> np.ndarray:
        """Sensing matrix in the sparse domain: y = (phi psi^T) s."""
        return self.phi @ self.psi.T

    @classmethod
    def bernoulli(cls, K: int, d_tar: float, rng: np.random.Generator) -> "MeasurementEnsemble":
        """{0,1} Bernoulli(0.5) patterns scaled by 1/m, DMD-displayable."""
        n = K * K
        m = max(1, retained_count(d_tar, n))
        phi = rng.integers(0, 2, size=(m, n)).astype(np.float64) / m
        return cls(phi, dct_basis(K))

    @classmethod
    def gaussian(cls, K: int, d_tar: float, rng: np.random.Generator) -> "MeasurementEnsemble":
        n = K * K
        m = max(1, retained_count(d_tar, n))
        return cls(rng.standard_normal((m, n)) / np.sqrt(m), dct_basis(K))


@dataclass
class OmpResult:
    coef: np.ndarray
    support: list[int]
    residual_norms: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.support)


def omp(y: np.ndarray, phi: np.ndarray, k_max: int | None = None,
        residual_tol: float | None = None) -> OmpResult:
    """Orthogonal matching pursuit.

    Each iteration adds the column most correlated (after unit-norm
    scaling) with the residual, refits by least squares on the support and
    updates the residual. Stops after ``k_max`` picks (default m // 4) or
    once ``||r|| <= residual_tol`` (default 1e-6 * ||y||).
    """
    y = np.asarray(y, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    m, n = phi.shape
    if y.shape != (m,):
        raise DimensionError(f"y has shape {y.shape}, expected ({m},)")
    if k_max is None:
        k_max = max(1, m // 4)
    k_max = min(k_max, m, n)
    if residual_tol is None:
        residual_tol = 1e-6 * np.linalg.norm(y)
    norms = np.linalg.norm(phi, axis=0)
    live = norms > 0
    inv = np.where(live, 1.0 / np.where(live, norms, 1.0), 0.0)

    r = y.copy()
    support: list[int] = []
    coef_s = np.zeros(0)
    history = [float(np.linalg.norm(r))]
    chosen = np.zeros(n, dtype=bool)
    while len(support) < k_max and history[-1] > residual_tol:
        score = np.abs(phi.T @ r) * inv
        score[chosen | ~live] = -np.inf
        j = int(np.argmax(score))
        if not np.isfinite(score[j]):
            break
        trial = support + [j]
        sub = phi[:, trial]
        coef_t, _, rank, _ = np.linalg.lstsq(sub, y, rcond=None)
        if rank < len(trial):
            coef = np.zeros(n)
            coef[support] = coef_s
            raise DegenerateError(f"singular least-squares refit with support {trial}", support, coef)
        support, coef_s = trial, coef_t
        chosen[j] = True
        r = y - sub @ coef_s
        history.append(float(np.linalg.norm(r)))
    coef = np.zeros(n)
    coef[support] = coef_s
    return OmpResult(coef, support, history)


def cs_reconstruct(measurements: np.ndarray, ensemble: MeasurementEnsemble, k_max: int | None = None,
                   residual_tol: float | None = None, truth: np.ndarray | None = None):
    """Recover a flattened patch (or a batch of them, rows) from y = phi x.

    Returns ``x_hat`` or ``(x_hat, psnr)`` when ``truth`` is given.
    """
    y = np.asarray(measurements, dtype=np.float64)
    single = y.ndim == 1
    Y = y[None] if single else y
    if Y.shape[1] != ensemble.m:
        raise DimensionError(f"{Y.shape[1]} measurements, ensemble has m={ensemble.m}")
    A = ensemble.dictionary
    out = np.empty((Y.shape[0], ensemble.n))
    for b in range(Y.shape[0]):
        res = omp(Y[b], A, k_max, residual_tol)
        out[b] = ensemble.psi.T @ res.coef
    x_hat = out[0] if single else out
    if truth is None:
        return x_hat
    return x_hat, psnr(np.asarray(truth), x_hat)


def psnr(truth: np.ndarray, estimate: np.ndarray, peak: float | None = None) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    mse = float(np.mean((truth - np.asarray(estimate, dtype=np.float64)) ** 2))
    if peak is None:
        peak = float(truth.max() - truth.min()) or 1.0
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def cs_reconstruct_cube(data: np.ndarray, K: int, d_tar: float, rng: np.random.Generator,
                        k_max: int | None = None) -> np.ndarray:
    """Measure every K x K tile of every band with one shared Bernoulli
    ensemble and reconstruct the cube from the measurements."""
    data = np.asarray(data, dtype=np.float64)
    H, W, ch = data.shape
    ph, pw = (-H) % K, (-W) % K
    padded = np.pad(data, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    ens = MeasurementEnsemble.bernoulli(K, d_tar, rng)
    gh, gw = padded.shape[0] // K, padded.shape[1] // K
    tiles = padded.reshape(gh, K, gw, K, ch).transpose(0, 2, 4, 1, 3).reshape(-1, K * K)
    y = tiles @ ens.phi.T
    rec = cs_reconstruct(y, ens, k_max)
    rec = rec.reshape(gh, gw, ch, K, K).transpose(0, 3, 1, 4, 2).reshape(gh * K, gw * K, ch)
    return rec[:H, :W]


def natural_patch(K: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random K x K patch scaled to [0, 1]."""
    base = gaussian_filter(rng.standard_normal((3 * K, 3 * K)), sigma=K / 3.0)[K:2 * K, K:2 * K]
    ramp = rng.standard_normal(2) @ np.stack(np.mgrid[0:K, 0:K] / K).reshape(2, -1)
    p = base.reshape(-1) / (base.std() + 1e-12) + 0.5 * ramp
    return (p - p.min()) / (p.max() - p.min() + 1e-12)


def cs_bench(rates, trials: int = 20, seed: int = 0, K: int = 8, sparsity: int = 3) -> list[dict]:
    """Sweep under-sampling rates; per rate report PSNR on smooth patches and
    the exact-support recovery rate on ``sparsity``-sparse DCT signals."""
    rows = []
    for rate in rates:
        rng = np.random.default_rng([seed, int(round(rate * 1e6))])
        ps, hits = [], 0
        for _ in range(trials):
            ens = MeasurementEnsemble.bernoulli(K, rate, rng)
            x = natural_patch(K, rng)
            _, p = cs_reconstruct(ens.phi @ x, ens, truth=x)
            ps.append(p)
            s = np.zeros(K * K)
            true = rng.choice(K * K, size=sparsity, replace=False)
            s[true] = rng.choice([-1.0, 1.0], size=sparsity) * rng.uniform(0.5, 1.5, size=sparsity)
            y = ens.dictionary @ s
            res = omp(y, ens.dictionary, k_max=max(sparsity, ens.m // 4))
            hits += set(res.support) == set(true.tolist())
        rows.append({"rate": float(rate), "psnr_mean": float(np.mean(ps)),
                     "psnr_std": float(np.std(ps)), "recovery_rate": hits / trials})
    return rows
