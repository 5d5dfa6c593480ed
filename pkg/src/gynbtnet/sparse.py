"""Submanifold sparsity for masked pretraining.

Occupancy masks are boolean arrays, ``True`` = active (visible) voxel,
either ``(D, H, W)`` for one volume or ``(B, D, H, W)`` for a batch. Sparse
kernels compute outputs only at active output sites and read only active
input voxels; every inactive output is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import _backend
from .kernels import functional as F
from .kernels.autograd import _emit
from .rng import Xoshiro256


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    patch_dims: tuple = (7, 8, 8)
    mask_ratio: float = 0.6
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise MaskError("mask_ratio must lie in [0, 1]")
        object.__setattr__(self, "patch_dims", tuple(int(p) for p in self.patch_dims))


def generate_patch_mask(dims, spec: MaskSpec) -> np.ndarray:
    """Tile ``dims`` into patches and hide each one with probability ``mask_ratio``."""
    dims = tuple(int(d) for d in dims)
    if any(d % p for d, p in zip(dims, spec.patch_dims)):
        raise MaskError(f"patch dims {spec.patch_dims} do not divide volume dims {dims}")
    grid = tuple(d // p for d, p in zip(dims, spec.patch_dims))
    rng = Xoshiro256(spec.rng_seed)
    hidden = rng.random(int(np.prod(grid))) < spec.mask_ratio
    active = ~hidden.reshape(grid)
    for axis, p in enumerate(spec.patch_dims):
        active = np.repeat(active, p, axis=axis)
    return active


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """One pyramid step: a coarse voxel is active iff any voxel of its 2^3 window is."""
    lead = mask.shape[:-3]
    D, H, W = mask.shape[-3:]
    pd, ph, pw = D % 2, H % 2, W % 2
    if pd or ph or pw:
        mask = np.pad(mask, [(0, 0)] * len(lead) + [(0, pd), (0, ph), (0, pw)])
    D2, H2, W2 = (D + pd) // 2, (H + ph) // 2, (W + pw) // 2
    return mask.reshape(*lead, D2, 2, H2, 2, W2, 2).any(axis=(-5, -3, -1))


def build_pyramid(mask: np.ndarray, levels: int) -> list:
    if levels < 1:
        raise MaskError("a pyramid needs at least one level")
    out = [np.asarray(mask, dtype=bool)]
    for _ in range(levels - 1):
        out.append(downsample_mask(out[-1]))
    return out


def _batched(mask, batch):
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 3:
        m = np.broadcast_to(m, (batch,) + m.shape)
    return m


def _check_masks(x, mask_in, mask_out, k, stride):
    B = x.shape[0]
    mi, mo = _batched(mask_in, B), _batched(mask_out, B)
    if mi.shape != (B,) + x.shape[2:]:
        raise MaskError(f"input mask {mi.shape[1:]} does not match tensor dims {x.shape[2:]}")
    if mo.shape[1:] != F.conv_out_dims(x.shape[2:], k, stride):
        raise MaskError(f"output mask {mo.shape[1:]} does not match output dims")
    if stride == 1 and not np.array_equal(mi, mo):
        raise MaskError("stride-1 submanifold conv requires mask_out == mask_in")
    return mi, mo


def sparse_conv3d(x, mask_in, mask_out, w, b, stride=1, counter=None):
    """Convolution evaluated only at active output sites over active input taps."""
    O, C, k, (Do, Ho, Wo) = F._check_conv(x, w, stride)
    mi, mo = _check_masks(x, mask_in, mask_out, k, stride)
    wm = w.reshape(O, -1)
    y = np.zeros((x.shape[0], O, Do, Ho, Wo), dtype=x.dtype)
    pairs = 0
    for n in range(x.shape[0]):
        sites = np.flatnonzero(mo[n]).astype(np.int64)
        if sites.size == 0:
            continue
        cols, p = _backend.vol2col_sites(
            np.ascontiguousarray(x[n]), np.ascontiguousarray(mi[n], dtype=np.uint8),
            sites, k, stride, k // 2, Ho, Wo,
        )
        pairs += p
        yn = y[n].reshape(O, -1)
        yn[:, sites] = wm @ cols + b[:, None]
    if counter is not None:
        counter.add_sparse(pairs * C * O)
    return y


def sparse_conv3d_backward(gy, x, mask_in, mask_out, w, stride=1, need_x=True):
    O, C, k, (Do, Ho, Wo) = F._check_conv(x, w, stride)
    mi, mo = _check_masks(x, mask_in, mask_out, k, stride)
    wm = w.reshape(O, -1)
    gw = np.zeros_like(wm)
    gb = np.zeros(O, dtype=x.dtype)
    gx = np.zeros_like(x) if need_x else None
    for n in range(x.shape[0]):
        sites = np.flatnonzero(mo[n]).astype(np.int64)
        if sites.size == 0:
            continue
        m8 = np.ascontiguousarray(mi[n], dtype=np.uint8)
        g = np.ascontiguousarray(gy[n]).reshape(O, -1)[:, sites]
        cols, _ = _backend.vol2col_sites(np.ascontiguousarray(x[n]), m8, sites, k, stride, k // 2, Ho, Wo)
        gw += g @ cols.T
        gb += g.sum(axis=1)
        if need_x:
            gx[n] = _backend.col2vol_sites(wm.T @ g, m8, sites, C, k, stride, k // 2, Ho, Wo)
    return gx, gw.reshape(w.shape), gb


def sparse_batch_norm(x, mask, gamma, beta, eps=1e-5):
    """Batch normalization with statistics pooled over active voxels only.

    ``mask=None`` means every voxel is active (plain batch normalization).
    Returns ``(y, saved)``.
    """
    B, C = x.shape[:2]
    if mask is None:
        m = np.ones((B, 1) + x.shape[2:], dtype=x.dtype)
    else:
        mb = _batched(mask, B)
        if mb.shape[1:] != x.shape[2:]:
            raise MaskError("mask dims do not match tensor dims")
        m = mb[:, None].astype(x.dtype)
    n = float(m.sum())
    if n < 2:
        raise MaskError("sparse batch norm needs at least 2 active voxels")
    axes = (0, 2, 3, 4)
    mu = np.sum(x * m, axis=axes, keepdims=True) / n
    xc = (x - mu) * m
    var = np.sum(xc * xc, axis=axes, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g = gamma[None, :, None, None, None]
    y = (xhat * g + beta[None, :, None, None, None]) * m
    return y, (xhat, inv, m, n)


def sparse_batch_norm_backward(gy, saved, gamma):
    xhat, inv, m, n = saved
    axes = (0, 2, 3, 4)
    gym = gy * m
    ggamma = np.sum(gym * xhat, axis=axes)
    gbeta = np.sum(gym, axis=axes)
    gxhat = gym * gamma[None, :, None, None, None]
    mean_g = np.sum(gxhat, axis=axes, keepdims=True) / n
    mean_gx = np.sum(gxhat * xhat, axis=axes, keepdims=True) / n
    gx = inv * (gxhat - mean_g - xhat * mean_gx) * m
    return gx, ggamma, gbeta


# -- tape wrappers -----------------------------------------------------------


def sparse_conv(tape, x, mask_in, mask_out, w, b, stride=1, counter=None):
    y = sparse_conv3d(x.data, mask_in, mask_out, w.data, b.data, stride, counter=counter)

    def backward(g):
        return sparse_conv3d_backward(g, x.data, mask_in, mask_out, w.data, stride,
                                      need_x=x.requires_grad)

    return _emit(tape, "sparse_conv3d", (x, w, b), y, backward)


def sparse_bn(tape, x, mask, gamma, beta, eps=1e-5):
    y, saved = sparse_batch_norm(x.data, mask, gamma.data, beta.data, eps)

    def backward(g):
        return sparse_batch_norm_backward(g, saved, gamma.data)

    return _emit(tape, "sparse_batch_norm", (x, gamma, beta), y, backward)


# -- sparse -> dense transition ---------------------------------------------


def densify(params: dict, target_shapes: dict) -> dict:
    """Carry pretrained tensors onto a dense layout, position by position.

    ``params`` and ``target_shapes`` are ordered mappings (name -> array,
    name -> shape). Convolution weights/biases and normalization affines
    transfer verbatim; masks are not part of either mapping.
    """
    src = list(params.items())
    dst = list(target_shapes.items())
    if len(src) != len(dst):
        raise F.ShapeError(f"layer count mismatch: {len(src)} source vs {len(dst)} target tensors")
    out = {}
    for (s_name, arr), (d_name, shape) in zip(src, dst):
        if tuple(arr.shape) != tuple(shape):
            raise F.ShapeError(f"shape mismatch at {s_name} -> {d_name}: {arr.shape} vs {tuple(shape)}")
        out[d_name] = arr.copy()
    return out
