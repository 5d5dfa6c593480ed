"""Differentiable dense 3D kernels on ``(batch, channel, depth, height, width)`` arrays."""

from ._backend import BACKEND
from .autograd import GradTape, Var
from .functional import (
    ComputeCounter,
    ShapeError,
    conv3d,
    conv3d_backward,
    conv3d_reference,
    conv_out_dims,
    instance_norm,
    instance_norm_backward,
    leaky_relu,
    leaky_relu_backward,
    upsample_concat,
    upsample_concat_backward,
)
from .gradcheck import GradCheckReport, NonFiniteError, finite_diff_check


def reduce_page_faults():
    """Keep large freed buffers in the heap instead of returning them to the OS.

    Convolution workspaces are tens of MB and reallocated every call; with
    glibc's default mmap threshold each reallocation page-faults afresh.
    Process-wide, so only entry points (CLI, training runs) call it.
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        ok = libc.mallopt(M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        return False
    return bool(ok)


__all__ = [
    "BACKEND",
    "ComputeCounter",
    "GradCheckReport",
    "GradTape",
    "NonFiniteError",
    "ShapeError",
    "Var",
    "conv3d",
    "conv3d_backward",
    "conv3d_reference",
    "conv_out_dims",
    "finite_diff_check",
    "instance_norm",
    "instance_norm_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "reduce_page_faults",
    "upsample_concat",
    "upsample_concat_backward",
]
