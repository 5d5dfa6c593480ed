# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels for volumetric convolution.

Every function here has a numpy twin in ``_fallback.py`` with the same
signature and bit-identical results; ``_backend.py`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t k, Py_ssize_t s) noexcept nogil:
    # first output index whose tap lands at input index >= 0
    cdef Py_ssize_t num = pad - k
    if num <= 0:
        return 0
    return (num + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t n_in, Py_ssize_t pad, Py_ssize_t k,
                           Py_ssize_t s, Py_ssize_t n_out) noexcept nogil:
    # one past the last output index whose tap stays below n_in
    cdef Py_ssize_t num = n_in - 1 + pad - k
    if num < 0:
        return 0
    cdef Py_ssize_t h = num // s + 1
    return h if h < n_out else n_out


def vol2col(real[:, :, :, ::1] x, int k, int stride, int pad,
            int Do, int Ho, int Wo):
    cdef Py_ssize_t C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K3 = k * k * k, P = Do * Ho * Wo
    dtype = np.float32 if real is float else np.float64
    out = np.empty((C * K3, P), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t c, kd, kh, kw, od, oh, ow, row, idd, ih, base
    cdef Py_ssize_t d0, d1, h0, h1, w0, w1
    # single write pass: padding taps are zeroed inline instead of a memset
    for c in prange(C, nogil=True, schedule="static"):
        for kd in range(k):
            d0 = _lo(pad, kd, stride)
            d1 = _hi(D, pad, kd, stride, Do)
            for kh in range(k):
                h0 = _lo(pad, kh, stride)
                h1 = _hi(H, pad, kh, stride, Ho)
                for kw in range(k):
                    w0 = _lo(pad, kw, stride)
                    w1 = _hi(W, pad, kw, stride, Wo)
                    row = c * K3 + (kd * k + kh) * k + kw
                    for od in range(Do):
                        idd = od * stride - pad + kd
                        for oh in range(Ho):
                            ih = oh * stride - pad + kh
                            base = (od * Ho + oh) * Wo
                            if od < d0 or od >= d1 or oh < h0 or oh >= h1:
                                for ow in range(Wo):
                                    cols[row, base + ow] = 0
                                continue
                            for ow in range(w0):
                                cols[row, base + ow] = 0
                            for ow in range(w0, w1):
                                cols[row, base + ow] = x[c, idd, ih, ow * stride - pad + kw]
                            for ow in range(w1, Wo):
                                cols[row, base + ow] = 0
    return out


def col2vol(real[:, ::1] cols, int C, int D, int H, int W, int k, int stride,
            int pad, int Do, int Ho, int Wo):
    cdef Py_ssize_t K3 = k * k * k
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((C, D, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t c, kd, kh, kw, od, oh, ow, row, idd, ih, base
    cdef Py_ssize_t d0, d1, h0, h1, w0, w1
    # channels own disjoint output slices, so accumulation order is fixed
    for c in prange(C, nogil=True, schedule="static"):
        for kd in range(k):
            d0 = _lo(pad, kd, stride)
            d1 = _hi(D, pad, kd, stride, Do)
            for kh in range(k):
                h0 = _lo(pad, kh, stride)
                h1 = _hi(H, pad, kh, stride, Ho)
                for kw in range(k):
                    w0 = _lo(pad, kw, stride)
                    w1 = _hi(W, pad, kw, stride, Wo)
                    row = c * K3 + (kd * k + kh) * k + kw
                    for od in range(d0, d1):
                        idd = od * stride - pad + kd
                        for oh in range(h0, h1):
                            ih = oh * stride - pad + kh
                            base = (od * Ho + oh) * Wo
                            for ow in range(w0, w1):
                                x[c, idd, ih, ow * stride - pad + kw] += cols[row, base + ow]
    return out


def vol2col_sites(real[:, :, :, ::1] x, cnp.uint8_t[:, :, ::1] mask_in,
                  int64_t[::1] sites, int k, int stride, int pad,
                  int Ho, int Wo):
    """Gather columns for the listed output sites, skipping inactive inputs.

    Returns ``(cols, pairs)`` where ``pairs`` counts (site, tap) combinations
    whose input voxel is in bounds and active.
    """
    cdef Py_ssize_t C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K3 = k * k * k, n = sites.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((C * K3, n), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t j, q, od, oh, ow, kd, kh, kw, idd, ih, iw, t, c
    cdef int64_t pairs = 0
    for j in range(n):
        q = sites[j]
        od = q // (Ho * Wo)
        oh = (q // Wo) % Ho
        ow = q % Wo
        t = 0
        for kd in range(k):
            idd = od * stride - pad + kd
            for kh in range(k):
                ih = oh * stride - pad + kh
                for kw in range(k):
                    iw = ow * stride - pad + kw
                    if (0 <= idd < D and 0 <= ih < H and 0 <= iw < W
                            and mask_in[idd, ih, iw]):
                        pairs += 1
                        for c in range(C):
                            cols[c * K3 + t, j] = x[c, idd, ih, iw]
                    t += 1
    return out, pairs


def col2vol_sites(real[:, ::1] cols, cnp.uint8_t[:, :, ::1] mask_in,
                  int64_t[::1] sites, int C, int k, int stride, int pad,
                  int Ho, int Wo):
    cdef Py_ssize_t D = mask_in.shape[0], H = mask_in.shape[1], W = mask_in.shape[2]
    cdef Py_ssize_t K3 = k * k * k, n = sites.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((C, D, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t j, q, od, oh, ow, kd, kh, kw, idd, ih, iw, t, c
    # taps outer, sites inner: each voxel sees contributions in tap order
    for t in range(K3):
        kd = t // (k * k)
        kh = (t // k) % k
        kw = t % k
        for j in range(n):
            q = sites[j]
            od = q // (Ho * Wo)
            oh = (q // Wo) % Ho
            ow = q % Wo
            idd = od * stride - pad + kd
            ih = oh * stride - pad + kh
            iw = ow * stride - pad + kw
            if (0 <= idd < D and 0 <= ih < H and 0 <= iw < W
                    and mask_in[idd, ih, iw]):
                for c in range(C):
                    x[c, idd, ih, iw] += cols[c * K3 + t, j]
    return out


cdef inline uint64_t _rotl(uint64_t x, int r) noexcept nogil:
    return (x << r) | (x >> (64 - r))


def xoshiro_fill(uint64_t[::1] state, Py_ssize_t n):
    """Advance a xoshiro256** state in place and return ``n`` raw outputs."""
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3], t
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = _rotl(s1 * 5, 7) * 9
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return out
