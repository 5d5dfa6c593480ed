"""Sparse-vs-dense encoder cost and compiled-vs-numpy kernel timing."""

from __future__ import annotations

import time

import numpy as np

from . import network as N
from . import sparse as S
from .kernels import _backend
from .kernels import functional as F


def encoder_cost(mask_ratio, dims=(32, 32, 32), patch_dims=(8, 8, 8), seed=0, config=None):
    """Multiply-accumulates and wall time of the sparse and dense encoder on one volume."""
    cfg = (config or N.NetworkConfig.toy()).for_pretraining()
    net = N.build(cfg, seed)
    x = np.random.default_rng(seed).standard_normal((1, 1) + tuple(dims))
    mask = S.generate_patch_mask(dims, S.MaskSpec(patch_dims, mask_ratio, seed))
    dense, sparse_ = F.ComputeCounter(), F.ComputeCounter()
    t0 = time.perf_counter()
    N.encode(net, x, counter=dense)
    t1 = time.perf_counter()
    N.encode(net, x, mask=mask, counter=sparse_)
    t2 = time.perf_counter()
    return {
        "mask_ratio": mask_ratio,
        "active_fraction": float(mask.mean()),
        "dense_macs": dense.dense,
        "sparse_macs": sparse_.sparse,
        "mac_ratio": sparse_.sparse / dense.dense,
        "dense_ms": round((t1 - t0) * 1e3, 2),
        "sparse_ms": round((t2 - t1) * 1e3, 2),
    }


def _best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1e3


def backend_timing(channels=8, dims=(32, 32, 32), repeat=5, seed=0):
    """Forward+backward time of one 3x3x3 conv under each available backend."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, channels) + tuple(dims))
    w = rng.standard_normal((channels, channels, 3, 3, 3)) * 0.1
    b = np.zeros(channels)
    gy = rng.standard_normal(x.shape)
    mask = rng.random((1,) + tuple(dims)) < 0.4

    def dense():
        F.conv3d(x, w, b)
        F.conv3d_backward(gy, x, w)

    def sparse():
        S.sparse_conv3d(x, mask, mask, w, b)
        S.sparse_conv3d_backward(gy, x, mask, mask, w)

    out = {}
    previous = _backend.BACKEND
    try:
        for name in _backend.available():
            _backend.use(name)
            out[name] = {"dense_conv_ms": round(_best_of(dense, repeat), 2),
                         "sparse_conv_ms": round(_best_of(sparse, repeat), 2)}
    finally:
        _backend.use(previous)
    return out


def run(mask_ratios=(0.4, 0.6, 0.8), dims=(32, 32, 32), seed=0, repeat=5, backends=True):
    report = {"dims": list(dims), "seed": seed,
              "encoder": [encoder_cost(r, dims, seed=seed) for r in mask_ratios]}
    if backends:
        report["backends"] = backend_timing(dims=dims, repeat=repeat, seed=seed)
    return report
