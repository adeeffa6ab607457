"""Synthetic vascular phantoms.

Random-walk tubes of varying radius stand in for vessels; bright
spherical distractors, a smooth background field, a point-spread blur and
Gaussian noise make plain intensity thresholding imperfect the same way
it is on real angiography: thin tubes sit below the bright-max threshold
and distractors sit above it. Ground truth stays binary and unblurred.

Everything is deterministic per seed, byte for byte.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, ShapeError
from .volume import Volume, save_metaimage


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (48, 48, 48)
    tubes: int = 3
    radius_range: tuple[float, float] = (1.2, 2.8)
    walk_step: float = 1.5
    curvature: float = 0.35          # direction jitter per step; 0 = straight
    noise: float = 0.015
    blobs: int = 3
    blob_radius_range: tuple[float, float] = (2.5, 4.0)
    blur_sigma: float = 0.3
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    max_foreground: float = 0.05
    straight_axis: int | None = None  # force axis-aligned full-length tubes

    def __post_init__(self):
        if len(self.extents) != 3 or any(int(e) < 8 for e in self.extents):
            raise ShapeError(f"phantom extents must be 3 values >= 8, got {self.extents}")
        if self.tubes < 1:
            raise ShapeError("phantom needs at least one tube")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ShapeError(f"bad radius range {self.radius_range}")
        if self.noise < 0:
            raise ShapeError("noise level must be >= 0")
        if self.straight_axis is not None and self.straight_axis not in (0, 1, 2):
            raise ShapeError("straight_axis must be 0, 1 or 2")


def _stamp_ball(grid, center, radius, value):
    """Max-blend a solid ball (voxel centers within radius) into grid."""
    shape = grid.shape
    r = float(radius)
    lo = [max(0, int(math.floor(c - r))) for c in center]
    hi = [min(shape[i], int(math.ceil(center[i] + r)) + 1) for i in range(3)]
    if any(l >= h for l, h in zip(lo, hi)):
        return
    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    inside = ((zz - center[0]) ** 2 + (yy - center[1]) ** 2
              + (xx - center[2]) ** 2) <= r * r
    box = grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    np.maximum(box, np.where(inside, value, 0.0).astype(grid.dtype), out=box)


def _unit(v):
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else np.array([1.0, 0.0, 0.0])


def _tube_intensity(radius, rng):
    # thin tubes render dimmer (partial-volume-like), thick ones brighter;
    # most of the band sits below 70% of the distractor-set maximum
    base = 0.45 + 0.11 * min(max(radius, 1.0), 3.0)
    return base + rng.uniform(-0.03, 0.03)


def _walk_tube(truth, intensity_map, spec, rng, radius):
    ext = np.asarray(spec.extents, dtype=np.float64)
    value = _tube_intensity(radius, rng)
    substep = 0.5
    if spec.straight_axis is not None:
        ax = spec.straight_axis
        pos = np.array([rng.uniform(radius + 1, e - radius - 1) for e in ext])
        pos[ax] = 0.0
        direction = np.zeros(3)
        direction[ax] = 1.0
        length = ext[ax]
    else:
        pos = np.array([rng.uniform(0.15 * e, 0.85 * e) for e in ext])
        direction = _unit(rng.normal(size=3))
        length = 2.0 * float(ext.max())
    traveled = 0.0
    while traveled <= length:
        _stamp_ball(truth, pos, radius, 1.0)
        _stamp_ball(intensity_map, pos, radius, value)
        pos = pos + direction * substep
        traveled += substep
        if spec.straight_axis is None:
            if np.any(pos < -radius) or np.any(pos > ext + radius):
                break
            direction = _unit(direction + spec.curvature * substep / spec.walk_step
                              * rng.normal(size=3))
        elif pos[spec.straight_axis] >= ext[spec.straight_axis]:
            break


def _smooth_background(extents, rng):
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 4))
    out = np.empty(extents, dtype=np.float64)
    grids = [np.linspace(0.0, 3.0, n) for n in extents]
    lo = [np.floor(g).astype(int).clip(0, 2) for g in grids]
    fr = [g - l for g, l in zip(grids, lo)]
    iz, iy, ix = lo[0][:, None, None], lo[1][None, :, None], lo[2][None, None, :]
    fz, fy, fx = fr[0][:, None, None], fr[1][None, :, None], fr[2][None, None, :]
    c00 = coarse[iz, iy, ix] * (1 - fx) + coarse[iz, iy, ix + 1] * fx
    c01 = coarse[iz, iy + 1, ix] * (1 - fx) + coarse[iz, iy + 1, ix + 1] * fx
    c10 = coarse[iz + 1, iy, ix] * (1 - fx) + coarse[iz + 1, iy, ix + 1] * fx
    c11 = coarse[iz + 1, iy + 1, ix] * (1 - fx) + coarse[iz + 1, iy + 1, ix + 1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out[...] = c0 * (1 - fz) + c1 * fz
    return 0.12 + 0.10 * out


def generate_phantom(spec: PhantomSpec):
    """Build one (image, truth) pair of Volumes from the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    extents = tuple(int(e) for e in spec.extents)
    truth = np.zeros(extents, dtype=np.float64)
    structures = np.zeros(extents, dtype=np.float64)
    # stratified radii: every phantom mixes thin and thick tubes
    lo, hi = spec.radius_range
    radii = np.linspace(lo, hi, spec.tubes) if spec.tubes > 1 else np.array([(lo + hi) / 2])
    radii = np.clip(radii + rng.uniform(-0.1, 0.1, spec.tubes), lo, hi)
    for radius in radii:
        _walk_tube(truth, structures, spec, rng, float(radius))
    for _ in range(spec.blobs):
        radius = rng.uniform(*spec.blob_radius_range)
        center = [rng.uniform(radius, e - radius) for e in extents]
        # distractor: brighter than any vessel, never in the truth; the
        # tight range pins the volume maximum the baseline normalizes by
        _stamp_ball(structures, center, radius, rng.uniform(0.98, 1.02))
    fg = truth.mean()
    if fg >= spec.max_foreground:
        raise DataError(
            f"phantom foreground fraction {fg:.3f} violates sparsity bound "
            f"{spec.max_foreground}"
        )
    if spec.blur_sigma > 0:
        structures = gaussian_filter(structures, spec.blur_sigma)
    image = np.maximum(_smooth_background(extents, rng), structures)
    if spec.noise > 0:
        image = image + spec.noise * rng.standard_normal(extents)
    image = np.maximum(image, 0.0)
    return (Volume(image.astype(np.float32), spec.spacing),
            Volume(truth.astype(np.float32), spec.spacing))


def write_phantom_dataset(out_dir, n_train=12, n_val=1, n_test=3, spec=None):
    """Write (image, truth) MetaImage pairs for a train/val/test split.

    File i of each split is generated from a seed derived from
    (spec.seed, split index, i), so any file is reproducible in isolation.
    Returns the written paths keyed by split.
    """
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test == 0:
        raise DataError("dataset needs a positive number of volumes")
    if n_train == 0:
        raise DataError("dataset needs at least one training volume")
    spec = spec or PhantomSpec()
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for split_idx, (split, count) in enumerate(
            (("train", n_train), ("val", n_val), ("test", n_test))):
        paths = []
        for i in range(count):
            sub = replace(spec, seed=int(np.random.SeedSequence(
                [int(spec.seed), split_idx, i]).generate_state(1)[0]))
            image, truth = generate_phantom(sub)
            img_path = os.path.join(out_dir, f"{split}_{i:03d}_img.mha")
            seg_path = os.path.join(out_dir, f"{split}_{i:03d}_seg.mha")
            save_metaimage(image, img_path, "MET_FLOAT")
            save_metaimage(truth, seg_path, "MET_UCHAR")
            paths.append((img_path, seg_path))
        written[split] = paths
    return written
