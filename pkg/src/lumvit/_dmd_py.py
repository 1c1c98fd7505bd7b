"""Pure-Python DMD acquisition loops, used when the compiled core is absent.

Same signatures as ``_dmd_core``. Counting is done by wrapping the
module-level ``dmd_apply`` so each retained position makes one call.
"""

import numpy as np


def dmd_apply(patch, bits, scale):
    patch = np.asarray(patch, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.uint8)
    K = bits.shape[0]
    out = np.zeros(patch.shape[2], dtype=np.float64)
    for j in range(K):
        for k in range(K):
            if bits[j, k]:
                out += patch[j, k]
    return out * scale


def acquire(image, bits, scales, spectral, mask):
    image = np.asarray(image, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.uint8)
    mask = np.asarray(mask, dtype=bool)
    spectral = np.asarray(spectral, dtype=np.float64)
    C, K = bits.shape[0], bits.shape[1]
    gw = image.shape[1] // K
    N = mask.shape[0]
    Y = np.zeros((N, C), dtype=np.float64)
    count = 0
    for i in range(N):
        r0, c0 = (i // gw) * K, (i % gw) * K
        patch = image[r0:r0 + K, c0:c0 + K]
        for j in np.flatnonzero(mask[i]):
            vec = dmd_apply(patch, bits[j], float(scales[j]))
            count += 1
            acc = 0.0
            for c in range(vec.shape[0]):
                acc += vec[c] * spectral[j, c]
            Y[i, j] = acc
    return Y, count


def acquire_batch(images, bits, scales, spectral, mask):
    images = np.asarray(images, dtype=np.float64)
    out = np.zeros((images.shape[0],) + np.shape(mask), dtype=np.float64)
    total = 0
    for b in range(images.shape[0]):
        out[b], n = acquire(images[b], bits, scales, spectral, mask)
        total += n
    return out, total
