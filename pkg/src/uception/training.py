"""Patch-based training and validation loops, snapshot averaging, the flat
key-value training config, and resumable training state.

Determinism contract: every random choice in an epoch flows from
default_rng([seed, epoch]), so a run is reproducible from (config, data)
alone and a resumed run replays the exact trajectory of an uninterrupted
one without serializing generator state.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .layers import Context, INFER, TRAIN
from .metrics import evaluate_masks, soft_dice, soft_dice_backward
from .models import UceptionCfg, build_uception, build_unet3d_baseline
from .optim import AdamState, adam_step
from .preprocess import clip_normalize, crop_to, reassemble, resample_trilinear, tile_patches
from .tensor import check_finite, dtype_for_mode
from .volume import load_metaimage


@dataclass
class TrainConfig:
    depth: int = 10
    levels: int = 3
    dropout: float = 0.25
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    cycle_epochs: int = 20
    epochs: int = 40
    batch: int = 2
    patch: int = 64
    seed: int = 0
    smooth: float = 1.0
    min_fg_frac: float = 0.0
    snapshots: int = 5
    model: str = "uception"
    patches_per_epoch: int = 0  # 0 = two per training volume
    mode: str = "f32"


_CONFIG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def parse_config(text) -> TrainConfig:
    """Parse 'key = value' lines; unknown keys list the valid ones."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: "
                + ", ".join(sorted(_CONFIG_FIELDS))
            )
        values[key] = value
    cfg = TrainConfig()
    casts = {int: int, float: float, str: str}
    for key, value in values.items():
        kind = type(getattr(cfg, key))
        try:
            values[key] = casts[kind](value)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} as "
                              f"{kind.__name__}") from exc
    cfg = replace(cfg, **values)
    if cfg.model not in ("uception", "unet3d"):
        raise ConfigError(f"model must be 'uception' or 'unet3d', got {cfg.model!r}")
    if cfg.mode not in ("f32", "f64"):
        raise ConfigError(f"mode must be 'f32' or 'f64', got {cfg.mode!r}")
    if cfg.patch % 2 ** cfg.levels:
        raise ConfigError(
            f"patch extent {cfg.patch} is not divisible by 2^levels = {2 ** cfg.levels}"
        )
    return cfg


def format_config(cfg: TrainConfig):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(TrainConfig))


def build_model_from_config(cfg: TrainConfig):
    mc = UceptionCfg(base_depth=cfg.depth, levels=cfg.levels, dropout_rate=cfg.dropout)
    dtype = dtype_for_mode(cfg.mode)
    if cfg.model == "uception":
        return build_uception(mc, seed=cfg.seed, dtype=dtype)
    return build_unet3d_baseline(mc, seed=cfg.seed, dtype=dtype)


# ---------------------------------------------------------------------------
# dataset loading and preprocessing


def preprocess_pair(image_vol, truth_vol, target_spacing=(1.0, 1.0, 1.0)):
    """Resample both to isotropic spacing, then clip+normalize the image.

    Returns (image array, boolean truth mask, spacing)."""
    img = resample_trilinear(image_vol, target_spacing)
    img = clip_normalize(img)
    seg = resample_trilinear(truth_vol, target_spacing)
    return img.data, seg.data > 0.5, img.spacing


def load_dataset(data_dir):
    """Discover (image, truth) MetaImage pairs named <split>_NNN_img/_seg."""
    splits = {"train": [], "val": [], "test": []}
    for name in sorted(os.listdir(data_dir)):
        if not (name.endswith("_img.mha") or name.endswith("_img.mhd")):
            continue
        seg_name = name.replace("_img.", "_seg.")
        seg_path = os.path.join(data_dir, seg_name)
        if not os.path.exists(seg_path):
            raise DataError(f"image {name} has no matching truth file {seg_name}")
        split = name.split("_", 1)[0]
        if split not in splits:
            raise DataError(f"file {name}: split prefix must be train/val/test")
        img, _ = load_metaimage(os.path.join(data_dir, name))
        seg, _ = load_metaimage(seg_path)
        splits[split].append((name, img, seg))
    if not splits["train"]:
        raise DataError(f"no training volumes found in {data_dir}")
    return splits


# ---------------------------------------------------------------------------
# patch sampling and the epoch loops


def sample_patch(rng, image, truth, patch, min_fg_frac=0.0, max_tries=20):
    """Uniform random patch origin, with optional foreground rejection."""
    for ax, ext in enumerate(image.shape):
        if ext < patch:
            raise ShapeError(f"volume extent {ext} on axis {ax} is below patch {patch}")
    best = None
    for _ in range(max_tries):
        origin = tuple(int(rng.integers(0, ext - patch + 1)) for ext in image.shape)
        sl = tuple(slice(o, o + patch) for o in origin)
        frac = float(truth[sl].mean())
        if best is None or frac > best[0]:
            best = (frac, sl)
        if min_fg_frac <= 0.0 or frac >= min_fg_frac:
            return image[sl], truth[sl]
    # nothing met the bar; fall back to the densest candidate seen
    _, sl = best
    return image[sl], truth[sl]


def train_epoch(model, dataset, adam: AdamState, *, batch=2, patch=64, seed=0,
                smooth=1.0, min_fg_frac=0.0, patches_per_epoch=0):
    """One epoch of -soft_dice descent over seeded random patches.

    dataset is a list of (image array, truth mask) pairs. Fully
    deterministic given the seed. Returns the mean batch loss.
    """
    if not dataset:
        raise DataError("train_epoch: empty dataset")
    rng = np.random.default_rng(seed if not np.iterable(seed) else list(seed))
    total = patches_per_epoch if patches_per_epoch > 0 else 2 * len(dataset)
    params = model.parameters()
    losses = []
    remaining = total
    while remaining > 0:
        take = min(batch, remaining)
        remaining -= take
        xs, ts = [], []
        for _ in range(take):
            vol = rng.integers(0, len(dataset))
            img, tru = sample_patch(rng, dataset[vol][0], dataset[vol][1], patch,
                                    min_fg_frac)
            xs.append(img[None, None])
            ts.append(tru[None, None])
        x = np.concatenate(xs).astype(model.dtype)
        t = np.concatenate(ts)
        ctx = Context(mode=TRAIN, rng=rng)
        y, cache = model.forward(x, ctx)
        losses.append(-soft_dice(y, t, smooth))
        grad_y = (-soft_dice_backward(y, t, smooth)).astype(model.dtype)
        grads = {}
        model.backward(grad_y, cache, grads)
        adam_step(params, grads, adam)
    return float(np.mean(losses))


def predict_volume(model, image, patch):
    """Tile, infer non-overlapping patches, reassemble, crop: a probability
    volume shaped exactly like the input."""
    padded_shape, tiles = tile_patches(image, patch)
    out_tiles = []
    ctx = Context(mode=INFER)
    for origin, block in tiles:
        y, _ = model.forward(block[None, None].astype(model.dtype), ctx)
        out_tiles.append((origin, y[0, 0]))
    prob = reassemble(out_tiles, padded_shape, dtype=model.dtype)
    return check_finite(crop_to(prob, image.shape), "probability volume")


def validate(model, image, truth, *, patch=64, spacing=(1.0, 1.0, 1.0),
             threshold=0.9, smooth=0.0, name=""):
    """Whole-volume validation: loss is -soft_dice over the reassembled
    probability volume; the report thresholds it into a hard mask."""
    prob = predict_volume(model, image, patch)
    loss = -soft_dice(prob, truth, smooth)
    report = evaluate_masks(prob >= threshold, truth, spacing, name=name)
    return loss, report


# ---------------------------------------------------------------------------
# snapshots


class SnapshotSet:
    """Best-k parameter snapshots ordered by validation loss."""

    def __init__(self, capacity=5):
        if capacity < 1:
            raise ShapeError("snapshot capacity must be >= 1")
        self.capacity = capacity
        self.entries = []  # (val_loss, epoch, params dict)

    def __len__(self):
        return len(self.entries)

    @property
    def worst_loss(self):
        if not self.entries:
            raise DataError("no snapshots stored")
        return self.entries[-1][0]


def snapshot_update(snap: SnapshotSet, epoch, val_loss, params):
    """Store a copy of params; keep only the best-capacity snapshots."""
    copied = {k: np.array(v, copy=True) for k, v in params.items()}
    snap.entries.append((float(val_loss), int(epoch), copied))
    snap.entries.sort(key=lambda e: (e[0], e[1]))
    del snap.entries[snap.capacity:]
    return snap


def snapshot_average(snap: SnapshotSet):
    """Element-wise arithmetic mean of the stored parameter vectors."""
    if not snap.entries:
        raise DataError("cannot average an empty snapshot set")
    out = {}
    n = len(snap.entries)
    for name in snap.entries[0][2]:
        acc = np.zeros_like(snap.entries[0][2][name], dtype=np.float64)
        for _, _, params in snap.entries:
            acc += params[name]
        out[name] = (acc / n).astype(snap.entries[0][2][name].dtype)
    return out


# ---------------------------------------------------------------------------
# resumable state


def save_train_state(path, model, adam: AdamState, epoch_done, val_history,
                     snap: SnapshotSet, pending):
    arrays = {"meta.epoch_done": np.array(epoch_done, dtype=np.int64),
              "meta.step": np.array(adam.step, dtype=np.int64),
              "meta.val_history": np.asarray(val_history, dtype=np.float64)}
    for name, arr in model.parameters().items():
        arrays[f"param::{name}"] = arr
    for name, arr in adam.m.items():
        arrays[f"adam_m::{name}"] = arr
    for name, arr in adam.v.items():
        arrays[f"adam_v::{name}"] = arr
    if pending is not None:
        for name, arr in pending.items():
            arrays[f"pending::{name}"] = arr
    for i, (val_loss, epoch, params) in enumerate(snap.entries):
        arrays[f"snapmeta::{i}"] = np.array([val_loss, float(epoch)])
        for name, arr in params.items():
            arrays[f"snap{i}::{name}"] = arr
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_train_state(path, model, adam: AdamState, snap: SnapshotSet):
    with np.load(path) as data:
        epoch_done = int(data["meta.epoch_done"])
        adam.step = int(data["meta.step"])
        val_history = [float(v) for v in data["meta.val_history"]]
        params = {}
        pending = {}
        snap_params = {}
        snap_meta = {}
        for key in data.files:
            if key.startswith("param::"):
                params[key[len("param::"):]] = data[key]
            elif key.startswith("adam_m::"):
                adam.m[key[len("adam_m::"):]] = data[key].astype(np.float64)
            elif key.startswith("adam_v::"):
                adam.v[key[len("adam_v::"):]] = data[key].astype(np.float64)
            elif key.startswith("pending::"):
                pending[key[len("pending::"):]] = data[key]
            elif key.startswith("snapmeta::"):
                snap_meta[int(key[len("snapmeta::"):])] = data[key]
            elif key.startswith("snap") and "::" in key:
                idx, name = key.split("::", 1)
                snap_params.setdefault(int(idx[4:]), {})[name] = data[key]
        model.set_parameters(params)
        snap.entries = []
        for i in sorted(snap_meta):
            val_loss, epoch = snap_meta[i]
            snap.entries.append((float(val_loss), int(epoch), snap_params[i]))
    return epoch_done, val_history, (pending or None)
