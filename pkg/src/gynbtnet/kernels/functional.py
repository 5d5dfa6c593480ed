"""Forward/backward pairs for the dense volumetric building blocks.

Arrays are 5D ``(batch, channels, depth, height, width)`` in C order. Each
``*_backward`` returns gradients with respect to every forward input, given
the upstream gradient and the values saved from the forward call.
"""

import numpy as np

from . import _backend


class ShapeError(ValueError):
    pass


def conv_out_dims(dims, k, stride):
    pad = k // 2
    return tuple((d + 2 * pad - k) // stride + 1 for d in dims)


def _check_conv(x, w, stride):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("conv3d expects 5D input and 5D weights")
    O, C, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[1] != C:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {C}")
    if not (w.shape[2] == w.shape[3] == w.shape[4]) or k % 2 == 0:
        raise ShapeError(f"kernel must be an odd cube, got {w.shape[2:]}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    out = conv_out_dims(x.shape[2:], k, stride)
    if min(out) < 1:
        raise ShapeError(f"zero-sized output {out}")
    return O, C, k, out


def dense_pairs(dims, k, stride):
    """Number of (output voxel, tap) pairs whose input voxel is in bounds."""
    pad = k // 2
    total = 1
    for d, o in zip(dims, conv_out_dims(dims, k, stride)):
        q = np.arange(o)[:, None] * stride - pad + np.arange(k)[None, :]
        total *= int(((q >= 0) & (q < d)).sum())
    return total


def _strided(xn, stride):
    if stride == 1:
        return xn.reshape(xn.shape[0], -1)
    return np.ascontiguousarray(xn[:, ::stride, ::stride, ::stride]).reshape(xn.shape[0], -1)


def conv3d(x, w, b, stride=1, counter=None):
    """Zero-padded 'same' convolution with output dims ``ceil(d / stride)``."""
    O, C, k, (Do, Ho, Wo) = _check_conv(x, w, stride)
    wm = w.reshape(O, -1)
    y = np.empty((x.shape[0], O, Do, Ho, Wo), dtype=x.dtype)
    for n in range(x.shape[0]):
        xn = np.ascontiguousarray(x[n])
        cols = _strided(xn, stride) if k == 1 else _backend.vol2col(xn, k, stride, k // 2, Do, Ho, Wo)
        yn = y[n].reshape(O, -1)
        np.matmul(wm, cols, out=yn)
        yn += b[:, None]
    if counter is not None:
        counter.add_dense(x.shape[0] * dense_pairs(x.shape[2:], k, stride) * C * O)
    return y


def conv3d_backward(gy, x, w, stride=1, need_x=True):
    O, C, k, (Do, Ho, Wo) = _check_conv(x, w, stride)
    D, H, W = x.shape[2:]
    wm = w.reshape(O, -1)
    gw = np.zeros_like(wm)
    gb = gy.sum(axis=(0, 2, 3, 4))
    gx = np.empty_like(x) if need_x else None
    for n in range(x.shape[0]):
        xn = np.ascontiguousarray(x[n])
        g = np.ascontiguousarray(gy[n]).reshape(O, -1)
        if k == 1:
            gw += g @ _strided(xn, stride).T
            if need_x:
                gc = (wm.T @ g).reshape(C, Do, Ho, Wo)
                if stride == 1:
                    gx[n] = gc
                else:
                    gx[n] = 0
                    gx[n][:, ::stride, ::stride, ::stride] = gc
            continue
        cols = _backend.vol2col(xn, k, stride, k // 2, Do, Ho, Wo)
        gw += g @ cols.T
        if need_x:
            del cols
            gx[n] = _backend.col2vol(wm.T @ g, C, D, H, W, k, stride, k // 2, Do, Ho, Wo)
    return gx, gw.reshape(w.shape), gb


def conv3d_reference(x, w, b, stride=1):
    """Direct tap-by-tap summation; the oracle optimized paths must match."""
    O, C, k, (Do, Ho, Wo) = _check_conv(x, w, stride)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad + stride), (pad, pad + stride), (pad, pad + stride)))
    y = np.zeros((x.shape[0], O, Do, Ho, Wo), dtype=np.float64)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                patch = xp[:, :, kd:kd + stride * Do:stride, kh:kh + stride * Ho:stride,
                           kw:kw + stride * Wo:stride]
                y += np.einsum("oc,bcdhw->bodhw", w[:, :, kd, kh, kw], patch)
    return y + b[None, :, None, None, None]


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel standardization. Returns ``(y, saved)``."""
    B, C = x.shape[:2]
    xr = x.reshape(B, C, -1)
    mu = xr.mean(axis=2, keepdims=True)
    xc = xr - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma[None, :, None] + beta[None, :, None]
    return y.reshape(x.shape), (xhat, inv)


def instance_norm_backward(gy, saved, gamma):
    xhat, inv = saved
    B, C = gy.shape[:2]
    g = gy.reshape(B, C, -1)
    ggamma = np.sum(g * xhat, axis=(0, 2))
    gbeta = np.sum(g, axis=(0, 2))
    gxhat = g * gamma[None, :, None]
    gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True)
                - xhat * np.mean(gxhat * xhat, axis=2, keepdims=True))
    return gx.reshape(gy.shape), ggamma, gbeta


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(gy, x, slope=0.01):
    # the tie at exactly zero takes the positive branch
    return np.where(x >= 0, gy, slope * gy)


def upsample2(x):
    """Nearest-neighbour doubling: every voxel becomes a 2x2x2 block."""
    B, C, D, H, W = x.shape
    out = np.empty((B, C, D, 2, H, 2, W, 2), dtype=x.dtype)
    out[...] = x[:, :, :, None, :, None, :, None]
    return out.reshape(B, C, 2 * D, 2 * H, 2 * W)


def upsample2_backward(gy):
    B, C, D2, H2, W2 = gy.shape
    return gy.reshape(B, C, D2 // 2, 2, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5, 7))


def _upsample_mode(x, skip):
    xs, ss = x.shape[2:], skip.shape[2:]
    if x.shape[0] != skip.shape[0]:
        raise ShapeError("batch sizes differ")
    if tuple(ss) == tuple(2 * d for d in xs):
        return True
    if tuple(ss) == tuple(xs):
        return False
    raise ShapeError(f"skip dims {tuple(ss)} match neither 2x nor 1x of {tuple(xs)}")


def upsample_concat(x, skip, w, b, counter=None):
    """Upsample ``x`` (nearest, x2), refine with a 1x1x1 conv, then stack ``[refined, skip]``.

    The 1x1x1 conv is pointwise and commutes exactly with nearest
    replication, so it runs at the coarse resolution. When ``skip`` already
    has the dims of ``x`` the upsampling step is skipped.
    """
    up = _upsample_mode(x, skip)
    if w.shape[2] != 1:
        raise ShapeError("projection must be a 1x1x1 conv")
    if w.shape[0] != skip.shape[1]:
        raise ShapeError(f"projection emits {w.shape[0]} channels, skip has {skip.shape[1]}")
    r = conv3d(x, w, b, 1, counter=counter)
    if up:
        r = upsample2(r)
    return np.concatenate([r, skip], axis=1)


def upsample_concat_backward(gy, x, skip, w):
    up = _upsample_mode(x, skip)
    O = w.shape[0]
    gr, gskip = gy[:, :O], gy[:, O:]
    if up:
        gr = upsample2_backward(gr)
    gx, gw, gb = conv3d_backward(np.ascontiguousarray(gr), x, w, 1)
    return gx, np.ascontiguousarray(gskip), gw, gb


class ComputeCounter:
    """Tally of multiply-accumulates executed by dense and sparse convolutions."""

    def __init__(self):
        self.dense = 0
        self.sparse = 0

    def add_dense(self, n):
        self.dense += int(n)

    def add_sparse(self, n):
        self.sparse += int(n)
