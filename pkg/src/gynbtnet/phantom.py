"""Seeded synthetic pelvic cohort.

Five labelled structures on a soft-tissue background. Geometry is laid out
in fractions of the volume so the roster scales with ``dims``. The last
structure is a thin random-walk tube only a few intensity units above the
background, which keeps it the hardest target to segment.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import volume
from .rng import Xoshiro256

STRUCTURES = ("bladder", "rectum", "hrctv", "uterus", "sigmoid")
NUM_CLASSES = len(STRUCTURES) + 1
MAX_ATTEMPTS = 100

# per-variant base intensities for labels 0..5
_LEVELS = {
    "pelvic": (0.0, 70.0, -50.0, 35.0, 20.0, 12.0),
    # easier multi-organ stand-in used for the intermediate supervised stage
    "multiorgan": (0.0, 80.0, -60.0, 45.0, 25.0, 22.0),
}


class PhantomGenerationError(RuntimeError):
    """Raised when no geometry draw satisfies the size constraints."""


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: float = 1.5
    noise_sd: float = 8.0
    rng_seed: int = 0
    variant: str = "pelvic"
    center_jitter: float = 0.04  # fraction of each axis
    size_jitter: float = 0.15  # relative radius change
    min_voxels: int = 50
    # tube volume bounds for the sigmoid analog, as fractions of the volume
    sigmoid_volume: tuple = (0.0006, 0.006)
    sigmoid_steps: int = 36
    levels: tuple = field(default=None)

    def __post_init__(self):
        if self.variant not in _LEVELS:
            raise ValueError(f"unknown phantom variant {self.variant!r}")
        if self.levels is None:
            object.__setattr__(self, "levels", _LEVELS[self.variant])
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.levels) != NUM_CLASSES:
            raise ValueError("levels needs one entry per label including background")

    def sigmoid_bounds(self):
        n = float(np.prod(self.dims))
        return int(self.sigmoid_volume[0] * n), int(self.sigmoid_volume[1] * n)

    def to_json(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["levels"] = list(self.levels)
        d["sigmoid_volume"] = list(self.sigmoid_volume)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        for key in ("dims", "levels", "sigmoid_volume"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _ellipsoid(grid, center, radii):
    z, y, x = grid
    return ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + (
        (x - center[2]) / radii[2]
    ) ** 2 <= 1.0


def _walk(rng, start, steps, dims, margin):
    """Smooth random walk heading up the depth axis, reflected off the walls."""
    pts = [np.asarray(start, dtype=np.float64)]
    direction = np.array([1.0, 0.0, 0.0])
    turns = rng.normal(3 * steps).reshape(steps, 3) * 0.35
    lo = np.full(3, margin)
    hi = np.asarray(dims, dtype=np.float64) - 1 - margin
    for i in range(steps):
        direction = direction + turns[i]
        direction /= np.linalg.norm(direction)
        nxt = pts[-1] + direction
        for a in range(3):
            if nxt[a] < lo[a] or nxt[a] > hi[a]:
                direction[a] = -direction[a]
                nxt[a] = np.clip(nxt[a], lo[a], hi[a])
        pts.append(nxt)
    return np.array(pts)


def _tube(shape, points, radius):
    out = np.zeros(shape, dtype=bool)
    r = int(np.ceil(radius))
    for p0, p1 in zip(points[:-1], points[1:]):
        for p in (p0, 0.5 * (p0 + p1)):
            c = np.round(p).astype(int)
            lo = np.maximum(c - r - 1, 0)
            hi = np.minimum(c + r + 2, shape)
            z, y, x = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            hit = (z - p[0]) ** 2 + (y - p[1]) ** 2 + (x - p[2]) ** 2 <= radius ** 2
            out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= hit
    if len(points) == 1:
        out |= _tube(shape, np.repeat(points, 2, axis=0), radius)
    return out


def draw_labels(spec: PhantomSpec, rng: Xoshiro256) -> np.ndarray:
    """One geometry draw; later labels overwrite earlier ones on overlap."""
    dims = np.asarray(spec.dims, dtype=np.float64)
    grid = np.ogrid[: spec.dims[0], : spec.dims[1], : spec.dims[2]]

    def center(frac):
        jit = rng.uniform(-spec.center_jitter, spec.center_jitter, 3)
        return (np.asarray(frac) + jit) * dims

    def radii(frac):
        scale = rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter, 3)
        return np.asarray(frac) * dims * scale

    labels = np.zeros(spec.dims, dtype=np.uint8)
    # bladder: large anterior ellipsoid
    labels[_ellipsoid(grid, center((0.50, 0.33, 0.50)), radii((0.14, 0.12, 0.17)))] = 1
    # rectum: straight posterior tube along the depth axis
    rc = center((0.0, 0.70, 0.50))
    r_rect = 0.065 * dims[1] * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter)
    z0, z1 = (np.array([0.15, 0.62]) + rng.uniform(-spec.center_jitter, spec.center_jitter)) * dims[0]
    z, y, x = grid
    rect = ((y - rc[1]) ** 2 + (x - rc[2]) ** 2 <= r_rect ** 2) & (z >= z0) & (z <= z1)
    labels[rect] = 2
    # hrctv: blob at the inferior pole of the uterus, partly covered by it
    uc = center((0.62, 0.50, 0.50))
    ur = radii((0.16, 0.09, 0.12))
    hc = uc - np.array([ur[0] * 0.95, 0.0, 0.0]) + rng.uniform(-1.0, 1.0, 3)
    labels[_ellipsoid(grid, hc, radii((0.08, 0.07, 0.08)))] = 3
    labels[_ellipsoid(grid, uc, ur)] = 4
    # sigmoid: curved tube rising from the top of the rectum
    start = np.array([z1, rc[1], rc[2]])
    radius = 0.035 * dims.mean() * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter)
    path = _walk(rng, start, spec.sigmoid_steps, spec.dims, margin=radius + 1)
    labels[_tube(spec.dims, path, radius)] = 5
    return labels


def _valid(labels, spec):
    counts = np.bincount(labels.ravel(), minlength=NUM_CLASSES)
    lo, hi = spec.sigmoid_bounds()
    return (
        all(counts[1:] >= spec.min_voxels)
        and lo <= counts[5] <= hi
        and counts[0] == counts.max()
    )


def base_intensities(labels, spec):
    levels = np.asarray(spec.levels, dtype=np.float64)
    return levels[labels]


def generate_case(spec: PhantomSpec, case_index: int):
    """Deterministic ``(VoxelGrid, LabelMap)`` for one case index."""
    rng = Xoshiro256.for_stream(spec.rng_seed, case_index)
    for _ in range(MAX_ATTEMPTS):
        labels = draw_labels(spec, rng)
        if _valid(labels, spec):
            break
    else:
        raise PhantomGenerationError(
            f"case {case_index}: no valid geometry after {MAX_ATTEMPTS} attempts"
        )
    img = ndimage.uniform_filter(base_intensities(labels, spec), size=3, mode="nearest")
    if spec.noise_sd > 0:
        img = img + spec.noise_sd * rng.normal(img.size).reshape(img.shape)
    s = (spec.spacing,) * 3
    return (
        volume.VoxelGrid(img.astype(np.float32), s),
        volume.LabelMap(labels, NUM_CLASSES, s),
    )


def write_cohort(spec: PhantomSpec, indices, out_dir):
    """Write image/label pairs plus a ``cohort.json`` manifest; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in indices:
        img, lbl = generate_case(spec, i)
        img_name, lbl_name = f"case_{i}_img.gbtv", f"case_{i}_lbl.gbtv"
        volume.save(img, out / img_name)
        volume.save(lbl, out / lbl_name)
        cases.append({"index": int(i), "image": img_name, "labels": lbl_name})
    manifest = {"seed": spec.rng_seed, "spec": spec.to_json(), "cases": cases}
    path = out / "cohort.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_cohort(manifest_path):
    """Load every case listed in a manifest as ``(index, VoxelGrid, LabelMap)``."""
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    out = []
    for case in manifest["cases"]:
        img = volume.load(path.parent / case["image"])
        lbl = volume.load(path.parent / case["labels"])
        out.append((case["index"], img, lbl))
    return out
