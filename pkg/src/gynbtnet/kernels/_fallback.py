"""Pure numpy versions of the compiled gather/scatter kernels.

Signatures and results match ``_core.pyx`` bit for bit: gathers are plain
copies and every scatter accumulates taps in the same order.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def _tap_slices(k, stride, pad, Do, Ho, Wo):
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                yield (
                    slice(kd, kd + stride * (Do - 1) + 1, stride),
                    slice(kh, kh + stride * (Ho - 1) + 1, stride),
                    slice(kw, kw + stride * (Wo - 1) + 1, stride),
                )


def _padded_shape(C, D, H, W, k, stride, pad, Do, Ho, Wo):
    # large enough for every tap of every output, at least the padded input
    need = lambda n_in, n_out: max(n_in + 2 * pad, stride * (n_out - 1) + k)
    return C, need(D, Do), need(H, Ho), need(W, Wo)


def vol2col(x, k, stride, pad, Do, Ho, Wo):
    C, D, H, W = x.shape
    xp = np.zeros(_padded_shape(C, D, H, W, k, stride, pad, Do, Ho, Wo), dtype=x.dtype)
    xp[:, pad:pad + D, pad:pad + H, pad:pad + W] = x
    out = np.empty((C, k ** 3, Do, Ho, Wo), dtype=x.dtype)
    for t, (sd, sh, sw) in enumerate(_tap_slices(k, stride, pad, Do, Ho, Wo)):
        out[:, t] = xp[:, sd, sh, sw]
    return out.reshape(C * k ** 3, Do * Ho * Wo)


def col2vol(cols, C, D, H, W, k, stride, pad, Do, Ho, Wo):
    xp = np.zeros(_padded_shape(C, D, H, W, k, stride, pad, Do, Ho, Wo), dtype=cols.dtype)
    c5 = cols.reshape(C, k ** 3, Do, Ho, Wo)
    for t, (sd, sh, sw) in enumerate(_tap_slices(k, stride, pad, Do, Ho, Wo)):
        xp[:, sd, sh, sw] += c5[:, t]
    return np.ascontiguousarray(xp[:, pad:pad + D, pad:pad + H, pad:pad + W])


def _site_taps(shape_in, mask_in, sites, k, stride, pad, Ho, Wo):
    D, H, W = shape_in
    od = sites // (Ho * Wo)
    oh = (sites // Wo) % Ho
    ow = sites % Wo
    for t in range(k ** 3):
        kd, kh, kw = t // (k * k), (t // k) % k, t % k
        idd = od * stride - pad + kd
        ih = oh * stride - pad + kh
        iw = ow * stride - pad + kw
        ok = (idd >= 0) & (idd < D) & (ih >= 0) & (ih < H) & (iw >= 0) & (iw < W)
        flat = np.where(ok, (idd * H + ih) * W + iw, 0)
        ok &= mask_in.reshape(-1)[flat].astype(bool)
        yield t, ok, flat[ok]


def vol2col_sites(x, mask_in, sites, k, stride, pad, Ho, Wo):
    C = x.shape[0]
    K3 = k ** 3
    xf = x.reshape(C, -1)
    out = np.zeros((C, K3, sites.shape[0]), dtype=x.dtype)
    pairs = 0
    for t, ok, flat in _site_taps(x.shape[1:], mask_in, sites, k, stride, pad, Ho, Wo):
        out[:, t, ok] = xf[:, flat]
        pairs += int(ok.sum())
    return out.reshape(C * K3, -1), pairs


def col2vol_sites(cols, mask_in, sites, C, k, stride, pad, Ho, Wo):
    D, H, W = mask_in.shape
    K3 = k ** 3
    out = np.zeros((C, D * H * W), dtype=cols.dtype)
    c3 = cols.reshape(C, K3, -1)
    for t, ok, flat in _site_taps(mask_in.shape, mask_in, sites, k, stride, pad, Ho, Wo):
        # a single tap maps distinct sites to distinct voxels
        out[:, flat] += c3[:, t, ok]
    return out.reshape(C, D, H, W)


def _rotl(x, r):
    return ((x << r) | (x >> (64 - r))) & _MASK64


def xoshiro_fill(state, n):
    s0, s1, s2, s3 = (int(v) for v in state)
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        out[i] = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
    return out
