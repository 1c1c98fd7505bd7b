# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled DMD acquisition loops.

Summation order is fixed: pattern rows, then columns, accumulated per
channel; the spectral dot product runs over channels in index order.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _dmd_apply(const double[:, :, ::1] img, Py_ssize_t r0, Py_ssize_t c0,
                            const unsigned char[:, ::1] bits, double scale,
                            double* out) noexcept nogil:
    cdef Py_ssize_t K = bits.shape[0]
    cdef Py_ssize_t ch = img.shape[2]
    cdef Py_ssize_t j, k, c
    for c in range(ch):
        out[c] = 0.0
    for j in range(K):
        for k in range(K):
            if bits[j, k]:
                for c in range(ch):
                    out[c] += img[r0 + j, c0 + k, c]
    for c in range(ch):
        out[c] *= scale


def dmd_apply(patch, bits, double scale):
    """One DMD operation on a single K x K x C_h patch."""
    cdef const double[:, :, ::1] p = np.ascontiguousarray(patch, dtype=np.float64)
    cdef const unsigned char[:, ::1] b = np.ascontiguousarray(bits, dtype=np.uint8)
    out = np.empty(p.shape[2], dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        _dmd_apply(p, 0, 0, b, scale, &o[0])
    return out


def acquire(image, bits, scales, spectral, mask):
    """Masked acquisition of one image.

    Returns ``(Y, op_count)``; ``op_count`` is the number of internal
    ``_dmd_apply`` calls made, one per retained position.
    """
    cdef const double[:, :, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef const unsigned char[:, :, ::1] bb = np.ascontiguousarray(bits, dtype=np.uint8)
    cdef const double[::1] s = np.ascontiguousarray(scales, dtype=np.float64)
    cdef const double[:, ::1] V = np.ascontiguousarray(spectral, dtype=np.float64)
    cdef const unsigned char[:, ::1] D = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t C = bb.shape[0], K = bb.shape[1], ch = img.shape[2]
    cdef Py_ssize_t gw = img.shape[1] // K
    cdef Py_ssize_t N = D.shape[0]
    Y_arr = np.zeros((N, C), dtype=np.float64)
    cdef double[:, ::1] Y = Y_arr
    buf_arr = np.empty(ch, dtype=np.float64)
    cdef double[::1] buf = buf_arr
    cdef Py_ssize_t i, j, c
    cdef double acc
    cdef long count = 0
    with nogil:
        for i in range(N):
            for j in range(C):
                if not D[i, j]:
                    continue
                _dmd_apply(img, (i // gw) * K, (i % gw) * K, bb[j], s[j], &buf[0])
                count += 1
                acc = 0.0
                for c in range(ch):
                    acc += buf[c] * V[j, c]
                Y[i, j] = acc
    return Y_arr, count


def acquire_batch(images, bits, scales, spectral, mask):
    """``acquire`` over a leading batch axis; returns ``(Y[B,N,C], total_ops)``."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    cdef Py_ssize_t B = images.shape[0], b
    out = None
    total = 0
    for b in range(B):
        Y, n = acquire(images[b], bits, scales, spectral, mask)
        if out is None:
            out = np.empty((B,) + Y.shape, dtype=np.float64)
        out[b] = Y
        total += n
    if out is None:
        out = np.zeros((0,) + np.shape(mask), dtype=np.float64)
    return out, total
