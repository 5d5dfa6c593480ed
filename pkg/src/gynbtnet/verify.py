"""Finite-difference verification of every differentiable kernel and loss."""

from __future__ import annotations

import numpy as np

from . import sparse as S
from . import training as T
from .kernels import autograd as A
from .kernels.gradcheck import finite_diff_check


def gradient_suite(seed=0, h=1e-3, tol=1e-4, n_coords=50):
    """Run the standard set of checks; returns a list of ``GradCheckReport``."""
    rng = np.random.default_rng((seed, 0x6b))
    reports = []

    def check(name, op, inputs, **kw):
        reports.append(finite_diff_check(op, inputs, h=h, tol=tol, n_coords=n_coords, seed=seed,
                                         name=name, **kw))

    x = rng.standard_normal((2, 3, 6, 6, 6))
    for k in (1, 3):
        for stride in (1, 2):
            w = rng.standard_normal((4, 3, k, k, k)) * 0.5
            b = rng.standard_normal(4)
            check(f"conv3d k{k} s{stride}",
                  lambda t, x, w, b, s=stride: A.conv3d(t, x, w, b, s), [x, w, b])

    g = rng.standard_normal(3) + 1.5
    be = rng.standard_normal(3)
    check("instance_norm", lambda t, x, g, b: A.instance_norm(t, x, g, b), [x, g, be])

    # keep inputs away from the kink at 0
    xr = rng.standard_normal((2, 3, 4, 4, 4))
    xr = np.where(np.abs(xr) < 0.05, 0.1, xr)
    check("leaky_relu", lambda t, x: A.leaky_relu(t, x), [xr])

    coarse = rng.standard_normal((2, 4, 3, 3, 3))
    skip = rng.standard_normal((2, 3, 6, 6, 6))
    wu = rng.standard_normal((3, 4, 1, 1, 1))
    bu = rng.standard_normal(3)
    check("upsample_concat", lambda t, x, s, w, b: A.upsample_concat(t, x, s, w, b),
          [coarse, skip, wu, bu])

    mask = rng.random((2, 6, 6, 6)) < 0.5
    down = S.downsample_mask(mask)
    w3 = rng.standard_normal((4, 3, 3, 3, 3)) * 0.5
    b3 = rng.standard_normal(4)
    active = {0: mask[:, None]}
    check("sparse_conv3d s1", lambda t, x, w, b: S.sparse_conv(t, x, mask, mask, w, b, 1),
          [x, w3, b3], eligible=active)
    check("sparse_conv3d s2", lambda t, x, w, b: S.sparse_conv(t, x, mask, down, w, b, 2),
          [x, w3, b3], eligible=active)
    check("sparse_batch_norm", lambda t, x, g, b: S.sparse_bn(t, x, mask, g, b), [x, g, be],
          eligible=active)

    recon = rng.standard_normal((2, 1, 4, 4, 4))
    target = rng.standard_normal(recon.shape)
    m2 = rng.random((2, 4, 4, 4)) < 0.5
    check("l2_masked_loss", lambda t, r: T.l2_masked_loss(t, r, target, m2), [recon])

    logits = rng.standard_normal((2, 6, 3, 3, 3))
    labels = rng.integers(0, 6, (2, 3, 3, 3))
    check("dice_ce_loss", lambda t, z: T.dice_ce_loss(t, z, labels), [logits])
    return reports
