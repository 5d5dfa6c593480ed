"""Residual encoder-decoder for volumetric segmentation and masked reconstruction.

Parameters live in an ordered ``name -> ndarray`` mapping. Names follow the
layer layout::

    stem.conv.{w,b}  stem.norm.{g,b}
    enc{s}.blk{j}.{conv1,norm1,conv2,norm2,proj}.{w,b,g}
    dec{s}.up.{w,b}  dec{s}.blk{j}.{...}
    head.{w,b}

``enc*`` and ``stem.*`` form the encoder; everything else is re-initialized
when weights move between training stages.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .kernels import autograd as A
from .kernels.autograd import Var
from .kernels.functional import ShapeError
from . import sparse as S

STAGES = ("pretrain", "supervised", "task")
# which checkpoint stages may seed the encoder of a run at a given stage
LEGAL_INIT = {"pretrain": (), "supervised": ("pretrain",), "task": ("pretrain", "supervised")}


class ConfigError(ValueError):
    pass


class DivisibilityError(ShapeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    num_stages: int = 4
    blocks_per_stage: int = 2
    base_channels: int = 8
    max_channels: int = 1024
    in_channels: int = 1
    num_classes: int = 6
    mode: str = "segmentation"
    norm_kind: str = "instance"
    leaky_slope: float = 0.01
    eps: float = 1e-5
    # extra stride-1 stage at the coarsest resolution, with a matching decoder stage
    bottleneck: bool = False
    decoder_blocks: int | None = None
    mask_enforcement: str = "per_stage"

    def __post_init__(self):
        if self.num_stages < 2:
            raise ConfigError("num_stages must be >= 2")
        if self.blocks_per_stage < 1 or self.base_channels < 1:
            raise ConfigError("blocks_per_stage and base_channels must be positive")
        if self.mode not in ("segmentation", "reconstruction"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.norm_kind not in ("instance", "sparse_batch"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.mask_enforcement not in ("per_stage", "bottleneck_only"):
            raise ConfigError(f"unknown mask_enforcement {self.mask_enforcement!r}")

    @classmethod
    def full(cls, **kw):
        base = dict(num_stages=5, blocks_per_stage=2, base_channels=64, max_channels=1024,
                    bottleneck=True)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw):
        base = dict(num_stages=4, blocks_per_stage=2, base_channels=8, max_channels=1024)
        base.update(kw)
        return cls(**base)

    def stage_channels(self):
        return tuple(min(self.base_channels * 2 ** s, self.max_channels) for s in range(self.num_stages))

    def encoder_levels(self):
        """(channels, stride) per encoder stage, bottleneck included."""
        chans = self.stage_channels()
        levels = [(c, 1 if s == 0 else 2) for s, c in enumerate(chans)]
        if self.bottleneck:
            levels.append((min(self.base_channels * 2 ** self.num_stages, self.max_channels), 1))
        return levels

    @property
    def n_decoder_blocks(self):
        return self.blocks_per_stage if self.decoder_blocks is None else self.decoder_blocks

    @property
    def out_channels(self):
        return self.num_classes if self.mode == "segmentation" else self.in_channels

    @property
    def divisor(self):
        return 2 ** (self.num_stages - 1)

    def for_pretraining(self):
        return replace(self, mode="reconstruction", norm_kind="sparse_batch")

    def for_segmentation(self):
        return replace(self, mode="segmentation", norm_kind="instance")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _block_shapes(prefix, cin, cout, stride):
    out = OrderedDict()
    out[prefix + "conv1.w"] = (cout, cin, 3, 3, 3)
    out[prefix + "conv1.b"] = (cout,)
    out[prefix + "norm1.g"] = (cout,)
    out[prefix + "norm1.b"] = (cout,)
    out[prefix + "conv2.w"] = (cout, cout, 3, 3, 3)
    out[prefix + "conv2.b"] = (cout,)
    out[prefix + "norm2.g"] = (cout,)
    out[prefix + "norm2.b"] = (cout,)
    if cin != cout or stride != 1:
        out[prefix + "proj.w"] = (cout, cin, 1, 1, 1)
        out[prefix + "proj.b"] = (cout,)
    return out


def parameter_shapes(config: NetworkConfig) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    c0 = config.base_channels
    shapes["stem.conv.w"] = (c0, config.in_channels, 3, 3, 3)
    shapes["stem.conv.b"] = (c0,)
    shapes["stem.norm.g"] = (c0,)
    shapes["stem.norm.b"] = (c0,)
    levels = config.encoder_levels()
    cin = c0
    for s, (c, stride) in enumerate(levels):
        for j in range(config.blocks_per_stage):
            shapes.update(_block_shapes(f"enc{s}.blk{j}.", cin, c, stride if j == 0 else 1))
            cin = c
    for s in range(len(levels) - 2, -1, -1):
        c = levels[s][0]
        shapes[f"dec{s}.up.w"] = (c, cin, 1, 1, 1)
        shapes[f"dec{s}.up.b"] = (c,)
        for j in range(config.n_decoder_blocks):
            shapes.update(_block_shapes(f"dec{s}.blk{j}.", 2 * c if j == 0 else c, c, 1))
        cin = c
    shapes["head.w"] = (config.out_channels, cin, 1, 1, 1)
    shapes["head.b"] = (config.out_channels,)
    return shapes


def is_encoder(name: str) -> bool:
    return name.startswith(("stem.", "enc"))


class GynBTNet:
    """A built network: config plus ordered parameters (``None`` when shape-only)."""

    def __init__(self, config: NetworkConfig, params=None, shapes=None):
        self.config = config
        self.shapes = shapes if shapes is not None else parameter_shapes(config)
        self.params = params

    def __repr__(self):
        return f"GynBTNet({self.config}, allocated={self.params is not None})"


def _init_tensor(name, shape, rng):
    kind = name.rsplit(".", 1)[1]
    if kind == "w":
        fan_in = int(np.prod(shape[1:]))
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if kind == "g":
        return np.ones(shape)
    return np.zeros(shape)


def build(config: NetworkConfig, init_seed: int = 0, allocate: bool = True) -> GynBTNet:
    shapes = parameter_shapes(config)
    if not allocate:
        return GynBTNet(config, None, shapes)
    rng = np.random.default_rng(init_seed)
    params = OrderedDict((n, _init_tensor(n, s, rng)) for n, s in shapes.items())
    return GynBTNet(config, params, shapes)


def count_parameters(net: GynBTNet) -> int:
    return sum(int(np.prod(s)) for s in net.shapes.values())


# -- forward -----------------------------------------------------------------


class _Ctx:
    def __init__(self, net, tape, pvars, counter, masks):
        self.cfg = net.config
        self.tape = tape
        self.p = pvars
        self.counter = counter
        self.masks = masks  # mask pyramid for the sparse encoder, else None

    def conv(self, name, x, stride, level_in=None, level_out=None):
        w, b = self.p[name + ".w"], self.p[name + ".b"]
        if level_in is not None:
            return S.sparse_conv(self.tape, x, self.masks[level_in], self.masks[level_out], w, b,
                                 stride, counter=self.counter)
        return A.conv3d(self.tape, x, w, b, stride, counter=self.counter)

    def norm(self, name, x, level=None):
        g, b = self.p[name + ".g"], self.p[name + ".b"]
        if self.cfg.norm_kind == "instance":
            return A.instance_norm(self.tape, x, g, b, self.cfg.eps)
        mask = None if level is None else self.masks[level]
        return S.sparse_bn(self.tape, x, mask, g, b, self.cfg.eps)

    def act(self, x):
        return A.leaky_relu(self.tape, x, self.cfg.leaky_slope)

    def block(self, prefix, x, stride, level_in=None, level_out=None):
        h = self.conv(prefix + "conv1", x, stride, level_in, level_out)
        h = self.act(self.norm(prefix + "norm1", h, level_out))
        h = self.conv(prefix + "conv2", h, 1, level_out, level_out)
        h = self.norm(prefix + "norm2", h, level_out)
        short = x
        if prefix + "proj.w" in self.p:
            short = self.conv(prefix + "proj", x, stride, level_in, level_out)
        return self.act(A.add(self.tape, h, short))


def _check_input(cfg, x):
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B, {cfg.in_channels}, D, H, W) input, got {x.shape}")
    if any(d % cfg.divisor for d in x.shape[2:]):
        raise DivisibilityError(f"spatial dims {x.shape[2:]} not divisible by {cfg.divisor}")


def _as_vars(net, requires_grad):
    if net.params is None:
        raise ConfigError("network was built without allocating parameters")
    return OrderedDict((n, Var(v, requires_grad)) for n, v in net.params.items())


def _run(net, x, tape=None, pvars=None, counter=None, masks=None, trace=None, encoder_only=False):
    cfg = net.config
    pvars = pvars if pvars is not None else _as_vars(net, False)
    ctx = _Ctx(net, tape, pvars, counter, masks)
    levels = cfg.encoder_levels()
    sparse_encoder = masks is not None and cfg.mask_enforcement == "per_stage"
    xv = x if isinstance(x, Var) else Var(x)
    if masks is not None and not sparse_encoder:
        xv = A.mul_mask(tape, xv, masks[0])

    def lv(i):
        return i if sparse_encoder else None

    if sparse_encoder:
        h = ctx.conv("stem.conv", xv, 1, 0, 0)
    else:
        h = ctx.conv("stem.conv", xv, 1)
    h = ctx.act(ctx.norm("stem.norm", h, lv(0)))
    skips = []
    level = 0
    for s, (_, stride) in enumerate(levels):
        for j in range(cfg.blocks_per_stage):
            st = stride if j == 0 else 1
            nxt = level + (1 if st == 2 else 0)
            h = ctx.block(f"enc{s}.blk{j}.", h, st, lv(level), lv(nxt))
            level = nxt
        skips.append(h)
        if trace is not None:
            trace.append(h.data)
    if masks is not None and not sparse_encoder:
        h = A.mul_mask(tape, h, masks[level])
    if encoder_only:
        return skips
    for s in range(len(levels) - 2, -1, -1):
        h = A.upsample_concat(tape, h, skips[s], pvars[f"dec{s}.up.w"], pvars[f"dec{s}.up.b"],
                              counter=counter)
        for j in range(cfg.n_decoder_blocks):
            h = ctx.block(f"dec{s}.blk{j}.", h, 1)
    return ctx.conv("head", h, 1)


def forward(net: GynBTNet, x, tape=None, pvars=None, counter=None, trace=None):
    """Dense forward pass. Returns a ``Var`` holding ``(B, out_channels, D, H, W)``."""
    _check_input(net.config, x.data if isinstance(x, Var) else x)
    return _run(net, x, tape, pvars, counter, None, trace)


def mask_levels(config: NetworkConfig) -> int:
    return sum(1 for _, s in config.encoder_levels() if s == 2) + 1


def forward_pretrain(net: GynBTNet, x, mask, tape=None, pvars=None, counter=None, trace=None):
    """Masked-reconstruction pass: sparse encoder over active voxels, dense decoder.

    ``mask`` is ``(D, H, W)`` or ``(B, D, H, W)`` boolean, ``True`` = visible.
    """
    cfg = net.config
    if cfg.mode != "reconstruction":
        raise ConfigError("forward_pretrain needs a reconstruction-mode network")
    arr = x.data if isinstance(x, Var) else x
    _check_input(cfg, arr)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = np.broadcast_to(mask, (arr.shape[0],) + mask.shape)
    if mask.shape != (arr.shape[0],) + arr.shape[2:]:
        raise S.MaskError(f"mask {mask.shape} does not match input {arr.shape}")
    masks = S.build_pyramid(mask, mask_levels(cfg))
    return _run(net, x, tape, pvars, counter, masks, trace)


def encode(net: GynBTNet, x, mask=None, counter=None):
    """Encoder activations per stage; sparse over ``mask`` when one is given."""
    cfg = net.config
    _check_input(cfg, x)
    if mask is None:
        return [v.data for v in _run(net, x, counter=counter, encoder_only=True)]
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = np.broadcast_to(mask, (x.shape[0],) + mask.shape)
    masks = S.build_pyramid(mask, mask_levels(cfg))
    return [v.data for v in _run(net, x, counter=counter, masks=masks, encoder_only=True)]


def encoder_names(net: GynBTNet):
    return [n for n in net.shapes if is_encoder(n)]


def transfer_encoder(source: GynBTNet, target_config: NetworkConfig, init_seed: int = 0) -> GynBTNet:
    """Fresh network for ``target_config`` whose encoder tensors are copied from ``source``."""
    target = build(target_config, init_seed)
    src = OrderedDict((n, source.params[n]) for n in encoder_names(source))
    dst = OrderedDict((n, target.shapes[n]) for n in encoder_names(target))
    target.params.update(S.densify(src, dst))
    return target


# -- checkpoints -------------------------------------------------------------

MAGIC = b"GBTCKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    net: GynBTNet
    stage: str
    meta: dict

    @property
    def config(self):
        return self.net.config


def encode_checkpoint(net: GynBTNet, stage: str, meta: dict | None = None) -> bytes:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    directory, blobs, offset = [], [], 0
    for name, arr in net.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": FORMAT_VERSION,
        "stage": stage,
        "config": net.config.to_dict(),
        "tensors": directory,
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(buf) < 16:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')}")
    config = NetworkConfig.from_dict(header["config"])
    expected = parameter_shapes(config)
    payload = memoryview(buf)[16 + hlen:]
    params = OrderedDict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        if expected.get(entry["name"]) != shape:
            raise CheckpointError(f"tensor {entry['name']} {shape} not derivable from config")
        n = int(np.prod(shape)) * 4
        start = entry["offset"]
        if start + n > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        params[entry["name"]] = np.frombuffer(payload[start:start + n], dtype="<f4").reshape(shape).astype(np.float64)
    if list(params) != list(expected):
        raise CheckpointError("checkpoint tensor set does not match its config")
    return Checkpoint(GynBTNet(config, params, expected), header["stage"], header.get("meta", {}))


def save_checkpoint(path, net: GynBTNet, stage: str, meta: dict | None = None):
    Path(path).write_bytes(encode_checkpoint(net, stage, meta))


def load_checkpoint(path, expect_stage=None) -> Checkpoint:
    ck = decode_checkpoint(Path(path).read_bytes())
    if expect_stage is not None and ck.stage not in (
        (expect_stage,) if isinstance(expect_stage, str) else tuple(expect_stage)
    ):
        raise CheckpointError(f"checkpoint stage {ck.stage!r} not accepted here (want {expect_stage})")
    return ck


def check_init_legal(run_stage: str, init_stage: str):
    if init_stage not in LEGAL_INIT[run_stage]:
        raise CheckpointError(f"a {run_stage} run cannot start from a {init_stage} checkpoint")
