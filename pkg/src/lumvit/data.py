"""Hyperspectral cubes, sample extraction and training-time augmentation.

Container formats
-----------------
HSC (cube)::

    HSC1 <H> <W> <bands> <f32|f64> hwc\\n
    [EXCLUDE <comma-separated 0-based band indices>\\n]
    <little-endian payload, H then W then band>

HSL (label map)::

    HSL1 <H> <W> u16\\n
    <little-endian uint16 payload, H then W>

Label value 0 marks an unlabeled pixel; classes are 1..K in the file and
0..K-1 everywhere else in the package.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionError, FormatError, ValidationError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _one_based_ranges(*spans) -> list[int]:
    out = []
    for span in spans:
        lo, hi = (span, span) if isinstance(span, int) else span
        out.extend(range(lo - 1, hi))
    return out


# Water-absorption bands, as 0-based indices into the full sensor band list.
INDIAN_PINES_EXCLUDE = _one_based_ranges((104, 108), (150, 163), 220)
SALINAS_EXCLUDE = _one_based_ranges((108, 112), (154, 167), 224)


@dataclass
class Cube:
    data: np.ndarray  # (H, W, len(band_mask))
    band_mask: np.ndarray = None  # retained indices into the sensor's band list
    bands: int = None  # sensor band count declared in the file

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"cube data must be H x W x bands, got {self.data.shape}")
        if self.bands is None:
            self.bands = self.data.shape[2]
        if self.band_mask is None:
            self.band_mask = np.arange(self.bands)
        self.band_mask = np.asarray(self.band_mask, dtype=np.int64)
        if len(self.band_mask) != self.data.shape[2]:
            raise DimensionError("band_mask length must equal the number of stored channels")
        if len(self.band_mask) and (np.any(np.diff(self.band_mask) <= 0) or self.band_mask[0] < 0
                                    or self.band_mask[-1] >= self.bands):
            raise ValidationError("band_mask must be strictly increasing within [0, bands)")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("cube data must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# HSC / HSL I/O


def write_cube(path, data: np.ndarray, dtype: str = "f32", exclude=None) -> None:
    """Write a full-band cube; ``exclude`` bands are recorded in the header
    and dropped on load."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise DimensionError(f"cube data must be H x W x bands, got {data.shape}")
    if dtype not in _DTYPES:
        raise ValidationError(f"dtype must be one of {sorted(_DTYPES)}")
    H, W, B = data.shape
    header = f"HSC1 {H} {W} {B} {dtype} hwc\n"
    if exclude:
        ex = sorted(set(int(e) for e in exclude))
        if ex[0] < 0 or ex[-1] >= B:
            raise ValidationError("excluded band index out of range")
        header += "EXCLUDE " + ",".join(str(e) for e in ex) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())


def save_cube(path, cube: Cube, dtype: str = "f32") -> None:
    write_cube(path, cube.data, dtype)


def _read_line(buf: bytes, start: int) -> tuple[str, int]:
    end = buf.find(b"\n", start)
    if end < 0:
        raise FormatError("header line is not newline-terminated", start)
    try:
        return buf[start:end].decode("ascii"), end + 1
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII", start) from exc


def _parse_dims(tokens, offset, names):
    dims = []
    for name, tok in zip(names, tokens):
        try:
            v = int(tok)
        except ValueError:
            raise FormatError(f"{name} is not an integer: {tok!r}", offset) from None
        if v <= 0:
            raise FormatError(f"{name} must be positive, got {v}", offset)
        dims.append(v)
    return dims


def load_cube(path) -> Cube:
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(b"HSC1 "):
        raise FormatError("bad magic, expected 'HSC1'", 0)
    line, pos = _read_line(buf, 0)
    tokens = line.split()
    if len(tokens) != 6:
        raise FormatError(f"header needs 6 fields, got {len(tokens)}", 0)
    H, W, B = _parse_dims(tokens[1:4], 5, ("height", "width", "bands"))
    if tokens[4] not in _DTYPES:
        raise FormatError(f"unknown dtype {tokens[4]!r}", 0)
    if tokens[5] != "hwc":
        raise FormatError(f"unsupported order {tokens[5]!r}", 0)
    dt = _DTYPES[tokens[4]]
    exclude: list[int] = []
    if buf.startswith(b"EXCLUDE", pos):
        ex_line, new_pos = _read_line(buf, pos)
        parts = ex_line.split(maxsplit=1)
        try:
            exclude = [int(t) for t in parts[1].split(",")] if len(parts) > 1 else []
        except ValueError:
            raise FormatError("EXCLUDE list must hold integers", pos) from None
        if any(e < 0 or e >= B for e in exclude):
            raise FormatError("EXCLUDE index out of range", pos)
        pos = new_pos
    expected = H * W * B * dt.itemsize
    have = len(buf) - pos
    if have < expected:
        raise FormatError(f"payload truncated: expected {expected} bytes, found {have}", pos + have)
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload", pos + expected)
    data = np.frombuffer(buf, dtype=dt, count=H * W * B, offset=pos).reshape(H, W, B)
    keep = np.setdiff1d(np.arange(B), np.asarray(exclude, dtype=np.int64))
    data = data[:, :, keep] if exclude else data.copy()
    return Cube(data.astype(dt.newbyteorder("="), copy=False), keep, B)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError("label map must be 2-D")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValidationError("labels must fit in uint16")
    H, W = labels.shape
    with open(path, "wb") as f:
        f.write(f"HSL1 {H} {W} u16\n".encode("ascii"))
        f.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def load_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(b"HSL1 "):
        raise FormatError("bad magic, expected 'HSL1'", 0)
    line, pos = _read_line(buf, 0)
    tokens = line.split()
    if len(tokens) != 4 or tokens[3] != "u16":
        raise FormatError("label header must be 'HSL1 <H> <W> u16'", 0)
    H, W = _parse_dims(tokens[1:3], 5, ("height", "width"))
    expected = H * W * 2
    have = len(buf) - pos
    if have < expected:
        raise FormatError(f"payload truncated: expected {expected} bytes, found {have}", pos + have)
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload", pos + expected)
    return np.frombuffer(buf, dtype="<u2", offset=pos).reshape(H, W).astype(np.int64)


def convert_mat(mat_path, key, out_path, exclude=None, dtype="f32"):
    """Convert a MATLAB cube (e.g. the public Indian Pines release) to HSC.

    Label maps use ``convert_mat_labels``.
    """
    from scipy.io import loadmat

    arr = loadmat(mat_path)[key]
    write_cube(out_path, np.asarray(arr, dtype=np.float64), dtype=dtype, exclude=exclude)


def convert_mat_labels(mat_path, key, out_path):
    from scipy.io import loadmat

    write_labels(out_path, np.asarray(loadmat(mat_path)[key], dtype=np.int64))


# ---------------------------------------------------------------------------
# samples


@dataclass
class LabeledSampleSet:
    """Windows centred on labeled pixels, read lazily from a padded cube."""

    padded: np.ndarray  # (H + 2r, W + 2r, C)
    coords: np.ndarray  # (n, 2) source pixel (row, col)
    labels: np.ndarray  # (n,) 0-based class index
    window: int = 9
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, k):
        return self.windows(np.array([k]))[0], int(self.labels[k]), tuple(self.coords[k])

    @property
    def num_channels(self) -> int:
        return self.padded.shape[2]

    def windows(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        w = self.window
        r = self.coords[idx, 0][:, None] + np.arange(w)[None, :]
        c = self.coords[idx, 1][:, None] + np.arange(w)[None, :]
        return self.padded[r[:, :, None], c[:, None, :]]

    def with_padded(self, padded: np.ndarray) -> "LabeledSampleSet":
        return LabeledSampleSet(padded, self.coords, self.labels, self.window, self.split)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


def _half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def extract_samples(cube: Cube | np.ndarray, label_map: np.ndarray, window: int = 9,
                    split_ratio=(4, 6), seed: int = 0):
    """One window per labeled pixel, split per class into (train, val).

    ``split_ratio`` is (train, val) parts. Borders are reflect-padded.
    """
    data = cube.data if isinstance(cube, Cube) else np.asarray(cube)
    label_map = np.asarray(label_map)
    if label_map.shape != data.shape[:2]:
        raise DimensionError(f"label map {label_map.shape} != cube spatial dims {data.shape[:2]}")
    if window % 2 != 1:
        raise ValidationError("window must be odd")
    r = window // 2
    padded = np.pad(data, ((r, r), (r, r), (0, 0)), mode="reflect")
    rng = np.random.default_rng(seed)
    frac = split_ratio[0] / float(sum(split_ratio))
    train_idx, val_idx = [], []
    rows, cols = np.nonzero(label_map > 0)
    coords = np.stack([rows, cols], axis=1)
    labels = label_map[rows, cols] - 1
    empty = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        n_train = _half_up(frac * len(members))
        if n_train == 0 or n_train == len(members):
            empty.append(int(cls) + 1)
            continue
        train_idx.append(members[:n_train])
        val_idx.append(members[n_train:])
    if empty:
        raise ValidationError(f"classes {empty} leave an empty train or val split")
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return (LabeledSampleSet(padded, coords[tr], labels[tr], window, "train"),
            LabeledSampleSet(padded, coords[va], labels[va], window, "val"))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, samples: LabeledSampleSet) -> "Standardizer":
        r = samples.window // 2
        pix = samples.padded[samples.coords[:, 0] + r, samples.coords[:, 1] + r].astype(np.float64)
        std = pix.std(axis=0)
        return cls(pix.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, arr: np.ndarray, dtype=np.float32) -> np.ndarray:
        return ((arr - self.mean) / self.std).astype(dtype)


def upsample_to_27(sample: np.ndarray, factor: int = 3) -> np.ndarray:
    """Nearest-neighbour enlargement of the two spatial axes (9 -> 27)."""
    sample = np.asarray(sample)
    return np.repeat(np.repeat(sample, factor, axis=-3), factor, axis=-2)


# ---------------------------------------------------------------------------
# synthetic scenes


def gen_synthetic(num_classes: int, bands: int, size: int, noise_sigma: float = 0.01,
                  seed: int = 0, dominance: float = 0.7):
    """Seeded synthetic scene: (Cube, label_map).

    Each class has a spectrum of three Gaussian bumps centred inside its own
    band segment, over a shared smooth baseline. Class abundances come from
    soft distance-to-seed fields; pixels whose dominant abundance is below
    ``dominance`` are left unlabeled (0).
    """
    if num_classes < 2:
        raise ValidationError("need at least 2 classes")
    if bands < num_classes:
        raise ValidationError("need at least one band per class")
    rng = np.random.default_rng(seed)
    axis = np.arange(bands, dtype=np.float64)
    seg = bands / num_classes
    spectra = np.zeros((num_classes, bands))
    for c in range(num_classes):
        centers = c * seg + rng.uniform(0.15, 0.85, 3) * seg
        widths = rng.uniform(0.06, 0.14, 3) * seg
        amps = rng.uniform(0.5, 1.0, 3)
        for mu, w, a in zip(centers, widths, amps):
            spectra[c] += a * np.exp(-0.5 * ((axis - mu) / w) ** 2)
    baseline = 0.3 + 0.1 * np.sin(2 * np.pi * axis / bands)

    seeds_per_class = 3
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    dist = np.empty((num_classes, size, size))
    for c in range(num_classes):
        pts = rng.uniform(0, 1, (seeds_per_class, 2))
        d = np.sqrt((yy[None] - pts[:, 0, None, None]) ** 2 + (xx[None] - pts[:, 1, None, None]) ** 2)
        warp = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16.0, mode="wrap")
        dist[c] = d.min(axis=0) + 0.02 * warp / (warp.std() + 1e-12)
    logits = -30.0 * dist
    logits -= logits.max(axis=0, keepdims=True)
    abund = np.exp(logits)
    abund /= abund.sum(axis=0, keepdims=True)

    gain = np.empty((num_classes, size, size))
    for c in range(num_classes):
        g = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8.0, mode="wrap")
        gain[c] = 1.0 + 0.1 * g / (np.abs(g).max() + 1e-12)
    cube = baseline[None, None, :] + np.einsum("chw,cb->hwb", abund * gain, spectra)
    if noise_sigma > 0:
        cube = cube + noise_sigma * rng.standard_normal(cube.shape)
    dominant = abund.argmax(axis=0)
    labels = np.where(abund.max(axis=0) >= dominance, dominant + 1, 0).astype(np.int64)
    return Cube(cube.astype(np.float32)), labels


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    label_smoothing: float = 0.1
    random_erase_p: float = 0.25
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    switch_prob: float = 0.5  # chance of cutmix when both are active

    @property
    def mixing(self) -> bool:
        return self.mixup_alpha > 0 or self.cutmix_alpha > 0


def smooth_labels(labels: np.ndarray, num_classes: int, eps: float, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full((len(labels), num_classes), eps / num_classes, dtype=np.float64)
    out[np.arange(len(labels)), labels] += 1.0 - eps
    return out.astype(dtype)


def mixup(x: np.ndarray, y: np.ndarray, lam: float):
    """Blend each sample with its mirror in the batch (x[::-1])."""
    return lam * x + (1 - lam) * x[::-1], lam * y + (1 - lam) * y[::-1]


def cutmix_box(H: int, W: int, lam: float, rng: np.random.Generator):
    ratio = np.sqrt(1.0 - lam)
    ch, cw = int(H * ratio), int(W * ratio)
    cy, cx = rng.integers(H), rng.integers(W)
    y0, y1 = np.clip(cy - ch // 2, 0, H), np.clip(cy + ch // 2, 0, H)
    x0, x1 = np.clip(cx - cw // 2, 0, W), np.clip(cx + cw // 2, 0, W)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(x: np.ndarray, y: np.ndarray, lam: float, rng: np.random.Generator):
    """Paste a box from the mirrored batch; label weight follows the pasted area."""
    H, W = x.shape[1], x.shape[2]
    y0, y1, x0, x1 = cutmix_box(H, W, lam, rng)
    out = x.copy()
    out[:, y0:y1, x0:x1] = x[::-1, y0:y1, x0:x1]
    lam_adj = 1.0 - (y1 - y0) * (x1 - x0) / float(H * W)
    return out, lam_adj * y + (1 - lam_adj) * y[::-1], lam_adj


def random_erase(x: np.ndarray, p: float, rng: np.random.Generator,
                 area=(0.02, 1 / 3), aspect=(0.3, 3.3)) -> np.ndarray:
    out = x.copy()
    B, H, W = x.shape[:3]
    for b in range(B):
        if rng.random() >= p:
            continue
        for _ in range(10):
            target = rng.uniform(*area) * H * W
            ar = np.exp(rng.uniform(np.log(aspect[0]), np.log(aspect[1])))
            h = int(round(np.sqrt(target * ar)))
            w = int(round(np.sqrt(target / ar)))
            if 0 < h < H and 0 < w < W:
                top, left = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
                out[b, top:top + h, left:left + w] = 0
                break
    return out


def augment(batch: np.ndarray, labels: np.ndarray, num_classes: int, cfg: AugmentConfig,
            rng: np.random.Generator):
    """Random erase, then mixup or cutmix, with label smoothing folded into
    the soft targets. Returns (batch', soft_labels)."""
    x = np.asarray(batch)
    y = smooth_labels(labels, num_classes, cfg.label_smoothing, dtype=x.dtype)
    if cfg.random_erase_p > 0:
        x = random_erase(x, cfg.random_erase_p, rng)
    if cfg.mixing:
        if len(x) < 2:
            raise ValidationError("mixup/cutmix need a batch of at least 2")
        use_cutmix = cfg.cutmix_alpha > 0 and (cfg.mixup_alpha <= 0 or rng.random() < cfg.switch_prob)
        if use_cutmix:
            lam = rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha)
            x, y, _ = cutmix(x, y, lam, rng)
        else:
            lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)
            x, y = mixup(x, y, lam)
    return x.astype(batch.dtype, copy=False), y.astype(batch.dtype, copy=False)
