"""Losses, optimizer, schedule, stage runner and sliding-window inference."""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network as N
from . import phantom, sparse, volume
from .kernels.autograd import GradTape, Var, _emit
from .kernels.gradcheck import NonFiniteError
from .rng import Xoshiro256, derive_seed

DICE_SMOOTH = 1e-5


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


def cosine_lr(t, T, lr_max, lr_min=0.0):
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={T}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, lr, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=0.01):
    """Update ``params`` in place; decay is decoupled from the adaptive step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            step = step + weight_decay * p
        p -= lr * step


# -- losses ------------------------------------------------------------------


def l2_masked(recon, target, mask, full_volume=False):
    """Mean squared error over masked (inactive) voxels. Returns ``(loss, grad)``.

    ``mask`` is ``(B, D, H, W)`` boolean with ``True`` = visible.
    """
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {target.shape}")
    if full_volume:
        sel = np.ones(recon.shape, dtype=bool)
    else:
        sel = np.broadcast_to(~np.asarray(mask, dtype=bool)[:, None], recon.shape)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("no masked voxels to reconstruct")
    diff = np.where(sel, recon - target, 0.0)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def dice_ce(logits, labels, smooth=DICE_SMOOTH):
    """Soft Dice over foreground classes plus voxel-mean cross-entropy.

    ``logits`` is ``(B, C, D, H, W)``, ``labels`` integer ``(B, D, H, W)``.
    Returns ``(loss, grad)``.
    """
    B, C = logits.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (B,) + logits.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.max() >= C or labels.min() < 0):
        raise ValueError(f"label value outside [0, {C})")
    p = _softmax(logits)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
    nvox = labels.size

    axes = (0, 2, 3, 4)
    inter = np.sum(p * onehot, axis=axes)[1:]
    psum = np.sum(p, axis=axes)[1:]
    gsum = np.sum(onehot, axis=axes)[1:]
    denom = psum + gsum + smooth
    dc = (2.0 * inter + smooth) / denom
    dice = 1.0 - float(np.mean(dc))

    p_true = np.sum(p * onehot, axis=1)
    ce = float(-np.mean(np.log(np.maximum(p_true, 1e-300))))

    # d(dice)/dp per foreground class, then back through the softmax
    gp = np.zeros_like(p)
    k = C - 1
    ddc = (2.0 * onehot[:, 1:] * denom[None, :, None, None, None]
           - (2.0 * inter + smooth)[None, :, None, None, None]) / (denom ** 2)[None, :, None, None, None]
    gp[:, 1:] = -ddc / k
    gz = p * (gp - np.sum(gp * p, axis=1, keepdims=True))
    gz += (p - onehot) / nvox
    return dice + ce, gz


def _scalar_loss(tape, name, x, value, grad):
    def backward(g):
        return (grad * g,)

    return _emit(tape, name, (x,), np.asarray(value, dtype=np.float64), backward)


def l2_masked_loss(tape, recon: Var, target, mask, full_volume=False):
    value, grad = l2_masked(recon.data, target, mask, full_volume)
    return _scalar_loss(tape, "l2_masked_loss", recon, value, grad)


def dice_ce_loss(tape, logits: Var, labels):
    value, grad = dice_ce(logits.data, labels)
    return _scalar_loss(tape, "dice_ce_loss", logits, value, grad)


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str = "task"
    patch_dims: tuple = (32, 32, 32)
    batch_size: int = 2
    epochs: int = 100
    steps_per_epoch: int = 25
    lr_max: float = 5e-5
    lr_min: float = 0.0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_check_mode: bool = False
    seed: int = 0
    cohort: str | None = None
    init: str | None = None
    out: str | None = None
    log: str | None = None
    mask_patch_dims: tuple = (8, 8, 8)
    mask_ratio: float = 0.6
    full_volume_l2: bool = False
    network: dict = field(default_factory=lambda: N.NetworkConfig.toy().to_dict())
    prefetch: int = 0

    def __post_init__(self):
        if self.stage not in N.STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.patch_dims = tuple(int(d) for d in self.patch_dims)
        self.mask_patch_dims = tuple(int(d) for d in self.mask_patch_dims)
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr_max > self.lr_min >= 0:
            raise ValueError("need lr_max > lr_min >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")

    @classmethod
    def desk(cls, stage, **kw):
        """Small-scale defaults for CPU runs on phantom cohorts."""
        if stage == "pretrain":
            base = dict(stage=stage, batch_size=8, epochs=50, lr_max=1e-4)
        else:
            base = dict(stage=stage, batch_size=2, epochs=100, lr_max=5e-5)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full(cls, stage, **kw):
        """Full-scale settings; not runnable on a CPU in reasonable time."""
        net = N.NetworkConfig.full().to_dict()
        if stage == "pretrain":
            base = dict(stage=stage, patch_dims=(112, 128, 128), batch_size=24, epochs=1000,
                        lr_max=1e-4, mask_patch_dims=(7, 8, 8), network=net)
        elif stage == "supervised":
            base = dict(stage=stage, patch_dims=(112, 128, 128), batch_size=2, epochs=1000,
                        lr_max=5e-5, network=net)
        else:
            base = dict(stage=stage, patch_dims=(80, 160, 160), batch_size=2, epochs=1000,
                        lr_max=5e-5, network=net)
        base.update(kw)
        return cls(**base)

    def net_config(self):
        cfg = N.NetworkConfig.from_dict(self.network)
        return cfg.for_pretraining() if self.stage == "pretrain" else cfg.for_segmentation()

    def to_dict(self):
        d = asdict(self)
        for k in ("patch_dims", "mask_patch_dims", "betas"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# -- data --------------------------------------------------------------------


@dataclass
class Case:
    index: int
    grid: volume.VoxelGrid  # z-normalized
    labels: volume.LabelMap

    @property
    def image(self):
        return self.grid.data.astype(np.float64)


def prepare_case(index, grid, lmap) -> Case:
    return Case(int(index), volume.znormalize(grid), lmap)


def load_cases(cohort_path) -> list:
    cases = [prepare_case(*item) for item in phantom.read_cohort(cohort_path)]
    if not cases:
        raise TrainingError(f"cohort {cohort_path} is empty")
    return cases


def make_batch(cases, cfg: TrainConfig, step: int):
    """Deterministic function of (seed, step): images, labels and (pretrain) masks."""
    imgs, lbls, masks = [], [], []
    for b in range(cfg.batch_size):
        pick = Xoshiro256(derive_seed(cfg.seed, 1, step, b)).below(len(cases))
        case = cases[pick]
        spec = volume.AugmentSpec(cfg.patch_dims, rng_seed=derive_seed(cfg.seed, 2, step, b))
        g, l = volume.augment(case.grid, case.labels, spec)
        imgs.append(g.data.astype(np.float64))
        lbls.append(l.labels)
        if cfg.stage == "pretrain":
            mspec = sparse.MaskSpec(cfg.mask_patch_dims, cfg.mask_ratio, derive_seed(cfg.seed, 3, step, b))
            masks.append(sparse.generate_patch_mask(cfg.patch_dims, mspec))
    x = np.stack(imgs)[:, None]
    return x, np.stack(lbls), (np.stack(masks) if masks else None)


class _Prefetcher:
    """Bounded producer thread; yields batches in step order."""

    def __init__(self, cases, cfg, steps, depth):
        self.q = queue.Queue(maxsize=depth)
        self.stop = threading.Event()
        self.thread = threading.Thread(target=self._run, args=(cases, cfg, steps), daemon=True)
        self.thread.start()

    def _run(self, cases, cfg, steps):
        for s in steps:
            if self.stop.is_set():
                return
            self.q.put(make_batch(cases, cfg, s))

    def get(self):
        return self.q.get()

    def close(self):
        self.stop.set()
        while self.thread.is_alive():
            try:
                self.q.get_nowait()
            except queue.Empty:
                self.thread.join(0.01)


# -- stage runner ------------------------------------------------------------


def loss_and_grads(net, cfg: TrainConfig, x, labels, masks, need_grads=True):
    tape = GradTape() if need_grads else None
    pv = N._as_vars(net, need_grads)
    if cfg.stage == "pretrain":
        out = N.forward_pretrain(net, x, masks, tape=tape, pvars=pv)
        loss = l2_masked_loss(tape, out, x, masks, cfg.full_volume_l2)
    else:
        out = N.forward(net, x, tape=tape, pvars=pv)
        loss = dice_ce_loss(tape, out, labels)
    value = float(loss.data)
    if not need_grads:
        return value, None
    if not math.isfinite(value):
        return value, None
    tape.backward(loss, np.float64(1.0))
    grads = {n: v.grad if v.grad is not None else np.zeros_like(v.data) for n, v in pv.items()}
    return value, grads


def initial_network(cfg: TrainConfig):
    netcfg = cfg.net_config()
    if cfg.stage == "pretrain":
        if cfg.init:
            raise N.CheckpointError("pretraining starts from scratch; no init checkpoint allowed")
        return N.build(netcfg, cfg.seed)
    if not cfg.init:
        return N.build(netcfg, cfg.seed)
    ck = N.load_checkpoint(cfg.init)
    N.check_init_legal(cfg.stage, ck.stage)
    return N.transfer_encoder(ck.net, netcfg, cfg.seed)


def run_stage(cfg: TrainConfig, cases=None, net=None, log_stream=None):
    """Train one stage. Returns ``(network, log_records)``; writes checkpoint/log if configured."""
    if cases is None:
        if not cfg.cohort:
            raise TrainingError("no cohort given")
        cases = load_cases(cfg.cohort)
    net = net if net is not None else initial_network(cfg)
    total = cfg.epochs * cfg.steps_per_epoch
    state = AdamWState()
    records = []
    log_fh = open(cfg.log, "w") if cfg.log else None
    pre = _Prefetcher(cases, cfg, range(total), cfg.prefetch) if cfg.prefetch > 0 and total else None
    meta = {"seed": cfg.seed, "epochs": cfg.epochs, "steps_per_epoch": cfg.steps_per_epoch}

    def emit(rec):
        records.append(rec)
        line = json.dumps(rec, sort_keys=True)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        if log_stream is not None:
            print(line, file=log_stream, flush=True)

    try:
        if cfg.grad_check_mode and total:
            x, labels, masks = make_batch(cases, cfg, 0)
            err = network_gradient_spot_check(net, cfg, x, labels, masks)
            emit({"grad_check_max_rel_err": err})
        step = 0
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            losses = []
            lr = cfg.lr_max
            for _ in range(cfg.steps_per_epoch):
                x, labels, masks = pre.get() if pre else make_batch(cases, cfg, step)
                lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)
                value, grads = loss_and_grads(net, cfg, x, labels, masks)
                if not math.isfinite(value):
                    _diagnostic(cfg, net, epoch, step, value)
                    raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch} step {step}")
                adamw_step(net.params, grads, state, lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
                losses.append(value)
                step += 1
            emit({"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(losses)),
                  "wall_ms": round((time.perf_counter() - t0) * 1e3, 1)})
    finally:
        if pre:
            pre.close()
        if log_fh:
            log_fh.close()
    if cfg.out:
        N.save_checkpoint(cfg.out, net, cfg.stage, meta)
    return net, records


def _diagnostic(cfg, net, epoch, step, value):
    if not cfg.out:
        return
    meta = {"error": "non-finite loss", "epoch": epoch, "step": step, "loss": repr(value)}
    params = {n: np.nan_to_num(p) for n, p in net.params.items()}
    N.save_checkpoint(str(cfg.out) + ".diag", N.GynBTNet(net.config, params, net.shapes), cfg.stage, meta)


def network_gradient_spot_check(net, cfg, x, labels, masks, n_params=20, h=1e-5, seed=0):
    """Max relative error of tape gradients vs central differences on random scalars.

    The step is smaller than the per-kernel checks use: through a few dozen
    kinked and normalized layers a 1e-3 step already shows curvature error of
    several percent, while 1e-5 stays well above float64 round-off.
    """
    _, grads = loss_and_grads(net, cfg, x, labels, masks)
    rng = np.random.default_rng(seed)
    names = list(net.params)
    worst = 0.0
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        p = net.params[name]
        i = int(rng.integers(p.size))
        old = p.flat[i]
        p.flat[i] = old + h
        fp, _ = loss_and_grads(net, cfg, x, labels, masks, need_grads=False)
        p.flat[i] = old - h
        fm, _ = loss_and_grads(net, cfg, x, labels, masks, need_grads=False)
        p.flat[i] = old
        num = (fp - fm) / (2 * h)
        ana = float(grads[name].flat[i])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


# -- inference ---------------------------------------------------------------


def _starts(d, p, step):
    if d <= p:
        return [0]
    out = list(range(0, d - p + 1, step))
    if out[-1] != d - p:
        out.append(d - p)
    return out


def predict_probabilities(net, image, patch=(32, 32, 32), overlap=0.5):
    """Sliding-window softmax probabilities ``(C, D, H, W)`` for one volume."""
    image = np.asarray(image, dtype=np.float64)
    dims = image.shape
    padded = tuple(max(d, p) for d, p in zip(dims, patch))
    if padded != dims:
        image = np.pad(image, [(0, q - d) for d, q in zip(dims, padded)])
    C = net.config.out_channels
    acc = np.zeros((C,) + padded)
    hits = np.zeros(padded)
    steps = [max(1, int(p * (1 - overlap))) for p in patch]
    for z in _starts(padded[0], patch[0], steps[0]):
        for y in _starts(padded[1], patch[1], steps[1]):
            for x in _starts(padded[2], patch[2], steps[2]):
                sl = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                logits = N.forward(net, image[sl][None, None]).data[0]
                acc[(slice(None),) + sl] += _softmax(logits[None])[0]
                hits[sl] += 1
    probs = acc / hits
    return probs[:, :dims[0], :dims[1], :dims[2]]


def segment(net, image, patch=(32, 32, 32), overlap=0.5) -> np.ndarray:
    return np.argmax(predict_probabilities(net, image, patch, overlap), axis=0).astype(np.uint8)


def reconstruction_loss(net, image, mask, full_volume=False):
    x = np.asarray(image, dtype=np.float64)[None, None]
    m = np.asarray(mask, dtype=bool)[None]
    out = N.forward_pretrain(net, x, m)
    return l2_masked(out.data, x, m, full_volume)[0]
