"""DMD acquisition schedule: the binary kernel bank, the fixed mask and the
fill token in one bit-exact file a hardware driver can replay.

Layout::

    DMDSCHED1 <K> <C> <C_h> <N>\\n
    C records: ceil(K*K/8) bytes of row-major pattern bits (MSB first,
               zero-padded), <f8 scale, C_h x <f8 spectral weights
    ceil(N*C/8) bytes of mask bits, row-major over (patch, kernel)
    C x <f8 fill token
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dmd import BinaryKernelBank
from .errors import DimensionError, FormatError
from .mask import FixedMask

MAGIC = "DMDSCHED1"


@dataclass(frozen=True)
class DmdSchedule:
    bank: BinaryKernelBank
    mask: FixedMask
    fill: np.ndarray  # (C,) float64

    def __post_init__(self):
        C = self.bank.num_kernels
        if self.mask.D.shape[1] != C:
            raise DimensionError(f"mask has {self.mask.D.shape[1]} kernels, bank has {C}")
        fill = np.asarray(self.fill, dtype=np.float64)
        if fill.shape != (C,):
            raise DimensionError(f"fill token shape {fill.shape} != ({C},)")
        object.__setattr__(self, "fill", fill)

    @property
    def num_tokens(self) -> int:
        return self.mask.D.shape[0]


def dumps(sched: DmdSchedule) -> bytes:
    bank = sched.bank
    K, C, ch, N = bank.patch, bank.num_kernels, bank.bands, sched.num_tokens
    out = [f"{MAGIC} {K} {C} {ch} {N}\n".encode("ascii")]
    for j in range(C):
        out.append(np.packbits(bank.bits[j].reshape(-1).astype(np.uint8)).tobytes())
        out.append(np.asarray(bank.scales[j], dtype="<f8").tobytes())
        out.append(np.asarray(bank.spectral[j], dtype="<f8").tobytes())
    out.append(np.packbits(sched.mask.D.reshape(-1).astype(np.uint8)).tobytes())
    out.append(sched.fill.astype("<f8").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> DmdSchedule:
    end = buf.find(b"\n")
    if end < 0:
        raise FormatError("missing header line", 0)
    parts = buf[:end].decode("ascii", errors="replace").split()
    if not parts or parts[0] != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC}", 0)
    if len(parts) != 5 or not all(p.isdigit() for p in parts[1:]):
        raise FormatError("header must be 'DMDSCHED1 K C C_h N'", 0)
    K, C, ch, N = (int(p) for p in parts[1:])
    if min(K, C, ch, N) < 1:
        raise FormatError("header dimensions must be positive", 0)
    pat_bytes = (K * K + 7) // 8
    rec = pat_bytes + 8 + 8 * ch
    mask_bytes = (N * C + 7) // 8
    pos = end + 1
    need = pos + C * rec + mask_bytes + 8 * C
    if len(buf) < need:
        raise FormatError(f"truncated schedule ({len(buf)} of {need} bytes)", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after fill token", need)
    bits = np.empty((C, K, K), dtype=np.uint8)
    scales = np.empty(C)
    spectral = np.empty((C, ch))
    for j in range(C):
        packed = np.frombuffer(buf, np.uint8, pat_bytes, pos)
        bits[j] = np.unpackbits(packed)[:K * K].reshape(K, K)
        pos += pat_bytes
        scales[j] = np.frombuffer(buf, "<f8", 1, pos)[0]
        pos += 8
        spectral[j] = np.frombuffer(buf, "<f8", ch, pos)
        pos += 8 * ch
    D = np.unpackbits(np.frombuffer(buf, np.uint8, mask_bytes, pos))[:N * C].reshape(N, C)
    pos += mask_bytes
    fill = np.frombuffer(buf, "<f8", C, pos).astype(np.float64)
    return DmdSchedule(BinaryKernelBank(bits, scales, spectral), FixedMask(D.astype(bool)), fill)


def write_schedule(path, sched: DmdSchedule) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(sched))


def read_schedule(path) -> DmdSchedule:
    with open(path, "rb") as fh:
        return loads(fh.read())


def schedule_from_model(model, d_tar: float | None = None) -> DmdSchedule:
    """Export the deployable acquisition program of a binarized model."""
    fm = model.export_mask(d_tar)
    if model.du is not None:
        fill = np.zeros(model.embed.num_kernels)
    else:
        fill = model.fill.data.astype(np.float64) if model.use_token else np.zeros(model.embed.num_kernels)
    return DmdSchedule(model.kernel_bank(), fm, fill)
