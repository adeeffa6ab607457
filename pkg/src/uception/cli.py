"""Batch command-line entry points: phantom, train, segment, evaluate,
gradcheck.

Every command writes a manifest.json into its output directory recording
the exact configuration, seed and package version, so any artifact can be
regenerated by replaying the manifest. Exit codes: 0 success, 2 config
error, 3 I/O error, 4 numeric error or failed check.
"""
from __future__ import annotations

import os

# honor the optional thread-count override before numpy initializes BLAS
if "UCEPTION_THREADS" in os.environ:
    for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_k, os.environ["UCEPTION_THREADS"])

import argparse
import json
import sys
import time

import numpy as np

from . import __version__
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MetaImageError,
    NumericError,
    ShapeError,
    UceptionError,
)
from .gradcheck import format_results, run_suite
from .metrics import summarize_reports, evaluate_masks
from .models import load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, write_phantom_dataset
from .preprocess import (
    clip_normalize,
    resample_nearest_indices,
    resample_trilinear,
    threshold_baseline,
)
from .training import (
    SnapshotSet,
    TrainConfig,
    build_model_from_config,
    format_config,
    load_dataset,
    load_train_state,
    parse_config,
    preprocess_pair,
    save_train_state,
    snapshot_average,
    snapshot_update,
    train_epoch,
    validate,
    predict_volume,
)
from .optim import AdamState, CyclicSchedule, cyclic_lr
from .volume import Volume, load_metaimage, save_metaimage, volume_to_mask

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (ConfigError,)
_IO_ERRORS = (OSError, MetaImageError, DataError, CheckpointError)
_NUMERIC_ERRORS = (NumericError, ShapeError)


def _version_string():
    return f"uception-{__version__}"


def write_manifest(out_dir, command, config, seed, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": _version_string(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    if args.n_train < 1 or args.n_val < 0 or args.n_test < 0:
        raise DataError("phantom: need n-train >= 1 and non-negative n-val/n-test")
    spec = PhantomSpec(
        extents=(args.extents,) * 3,
        tubes=args.tubes,
        blobs=args.blobs,
        noise=args.noise,
        seed=args.seed,
    )
    written = write_phantom_dataset(args.out, args.n_train, args.n_val, args.n_test,
                                    spec)
    outputs = [p for pair_list in written.values() for pair in pair_list for p in pair]
    config = {
        "extents": args.extents, "tubes": args.tubes, "blobs": args.blobs,
        "noise": args.noise, "n_train": args.n_train, "n_val": args.n_val,
        "n_test": args.n_test,
    }
    write_manifest(args.out, "phantom", config, args.seed, outputs, started)
    print(f"wrote {len(outputs)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def run_training(cfg: TrainConfig, data_dir, out_dir, resume=False, echo=print):
    """Drive the full training loop; returns a summary dict."""
    os.makedirs(out_dir, exist_ok=True)
    splits = load_dataset(data_dir)
    if not splits["val"]:
        raise DataError("training needs at least one validation volume")
    train_set = [preprocess_pair(img, seg)[:2] for _, img, seg in splits["train"]]
    val_set = []
    for _, img, seg in splits["val"]:
        vimg, vmask, vspacing = preprocess_pair(img, seg)
        val_set.append((vimg, vmask, vspacing))

    model = build_model_from_config(cfg)
    adam = AdamState(lr=cfg.lr_max)
    schedule = CyclicSchedule(cfg.lr_max, cfg.lr_min, cfg.cycle_epochs)
    snap = SnapshotSet(cfg.snapshots)
    state_path = os.path.join(out_dir, "train_state.npz")
    log_path = os.path.join(out_dir, "train_log.tsv")
    config_snapshot = os.path.join(out_dir, "config.used")

    val_history = []
    pending = None
    start_epoch = 0
    if resume and os.path.exists(state_path):
        with open(config_snapshot, encoding="utf-8") as fh:
            stored = parse_config(fh.read())
        for f in ("depth", "levels", "dropout", "lr_max", "lr_min", "cycle_epochs",
                  "batch", "patch", "seed", "smooth", "min_fg_frac", "snapshots",
                  "model", "patches_per_epoch", "mode"):
            if getattr(stored, f) != getattr(cfg, f):
                raise ConfigError(
                    f"resume config mismatch on {f!r}: state has "
                    f"{getattr(stored, f)}, new config has {getattr(cfg, f)}"
                )
        epoch_done, val_history, pending = load_train_state(state_path, model, adam,
                                                            snap)
        start_epoch = epoch_done + 1
        echo(f"resuming after epoch {epoch_done}")
    else:
        with open(config_snapshot, "w", encoding="utf-8") as fh:
            fh.write(format_config(cfg))
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("# epoch\tlr\ttrain_loss\tval_loss\tsnapshot\n")

    def validate_all(m):
        losses = []
        for vimg, vmask, vspacing in val_set:
            loss, _ = validate(m, vimg, vmask, patch=cfg.patch, spacing=vspacing)
            losses.append(loss)
        return float(np.mean(losses))

    params = model.parameters()
    for epoch in range(start_epoch, cfg.epochs):
        adam.lr = cyclic_lr(schedule, epoch)
        train_loss = train_epoch(
            model, train_set, adam, batch=cfg.batch, patch=cfg.patch,
            seed=[cfg.seed, epoch], smooth=cfg.smooth, min_fg_frac=cfg.min_fg_frac,
            patches_per_epoch=cfg.patches_per_epoch,
        )
        val_loss = validate_all(model)
        captured = 0
        if (len(val_history) >= 2 and pending is not None
                and val_history[-1] < val_history[-2] and val_history[-1] < val_loss):
            snapshot_update(snap, epoch - 1, val_history[-1], pending)
            captured = 1
        val_history.append(val_loss)
        pending = {k: v.copy() for k, v in params.items()}
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(f"{epoch}\t{adam.lr:.8g}\t{train_loss:.6f}\t{val_loss:.6f}"
                     f"\t{captured}\n")
        save_train_state(state_path, model, adam, epoch, val_history, snap, pending)
        echo(f"epoch {epoch}: lr={adam.lr:.2e} train={train_loss:.4f} "
             f"val={val_loss:.4f}{' snapshot' if captured else ''}")

    if len(snap) == 0 and val_history:
        # no interior local minimum; keep the final weights
        snapshot_update(snap, cfg.epochs - 1, val_history[-1], params)
    avg_params = snapshot_average(snap)
    avg_model = build_model_from_config(cfg)
    avg_model.set_parameters(avg_params)
    avg_val = validate_all(avg_model)

    last_path = os.path.join(out_dir, "model_last.ucpt")
    avg_path = os.path.join(out_dir, "model_avg.ucpt")
    save_checkpoint(model, last_path)
    save_checkpoint(avg_model, avg_path)
    snap_paths = []
    for val_loss, epoch, sp in snap.entries:
        snap_model = build_model_from_config(cfg)
        snap_model.set_parameters(sp)
        p = os.path.join(out_dir, f"snapshot_e{epoch:04d}.ucpt")
        save_checkpoint(snap_model, p)
        snap_paths.append(p)
    return {
        "val_history": val_history,
        "snapshots": [(e, v) for v, e, _ in snap.entries],
        "avg_val_loss": avg_val,
        "worst_snapshot_loss": snap.worst_loss,
        "paths": {"last": last_path, "avg": avg_path, "snapshots": snap_paths,
                  "log": log_path, "state": state_path},
    }


def cmd_train(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    with open(args.config, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    summary = run_training(cfg, args.data, args.out, resume=args.resume)
    outputs = [summary["paths"]["last"], summary["paths"]["avg"],
               summary["paths"]["log"], summary["paths"]["state"]]
    outputs += summary["paths"]["snapshots"]
    write_manifest(args.out, "train",
                   {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
                   cfg.seed, outputs, started)
    print(f"final val loss {summary['val_history'][-1]:.4f}; "
          f"averaged-model val loss {summary['avg_val_loss']:.4f}; "
          f"{len(summary['paths']['snapshots'])} snapshots")
    return EXIT_OK


# ---------------------------------------------------------------------------
# segment


def cmd_segment(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    model = load_checkpoint(args.checkpoint)
    volume, header = load_metaimage(args.volume)
    if not header.spacing_present:
        raise MetaImageError(
            f"{args.volume}: header carries no ElementSpacing; cannot map to "
            "isotropic space"
        )
    if args.patch % 2 ** model.cfg.levels:
        raise ConfigError(
            f"patch {args.patch} is not divisible by 2^levels = {2 ** model.cfg.levels}"
        )
    iso = clip_normalize(resample_trilinear(volume, (1.0, 1.0, 1.0)))
    prob = predict_volume(model, iso.data, args.patch)
    mask_iso = (prob >= args.threshold).astype(np.float32)
    # back to the original grid: nearest-neighbour gather per axis
    idz, idy, idx = resample_nearest_indices(volume.extents, volume.spacing,
                                             mask_iso.shape, (1.0, 1.0, 1.0))
    mask = mask_iso[np.ix_(idz, idy, idx)]
    out_vol = Volume(mask, volume.spacing)
    out_dir = os.path.dirname(os.path.abspath(args.out_mask)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_metaimage(out_vol, args.out_mask, "MET_UCHAR")
    write_manifest(out_dir, "segment",
                   {"checkpoint": args.checkpoint, "volume": args.volume,
                    "threshold": args.threshold, "patch": args.patch},
                   0, [args.out_mask], started)
    print(f"wrote mask {args.out_mask} ({int(mask.sum())} foreground voxels)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _load_mask(path):
    vol, _ = load_metaimage(path)
    return volume_to_mask(vol), vol.spacing


def cmd_evaluate(args):
    if len(args.pred) != len(args.truth):
        raise DataError(
            f"unpaired file sets: {len(args.pred)} predictions vs "
            f"{len(args.truth)} truths"
        )
    if args.image and len(args.image) != len(args.truth):
        raise DataError(
            f"unpaired file sets: {len(args.image)} images vs "
            f"{len(args.truth)} truths"
        )
    reports = []
    lines = []
    for pred_path, truth_path in zip(args.pred, args.truth):
        pred, spacing = _load_mask(pred_path)
        truth, tspacing = _load_mask(truth_path)
        report = evaluate_masks(pred, truth, tspacing,
                                name=os.path.basename(pred_path))
        reports.append(report)
        lines.append(report.to_record())
    text = "\n".join(lines) + "\n" + summarize_reports(reports)
    if args.image:
        baseline_reports = []
        for img_path, truth_path in zip(args.image, args.truth):
            vol, _ = load_metaimage(img_path)
            truth, tspacing = _load_mask(truth_path)
            mask = threshold_baseline(clip_normalize(vol), args.baseline_fraction)
            baseline_reports.append(
                evaluate_masks(mask, truth, tspacing,
                               name=f"baseline:{os.path.basename(img_path)}"))
        text += "\nbaseline (threshold at {:.0%} of max intensity)\n".format(
            args.baseline_fraction)
        text += "\n".join(r.to_record() for r in baseline_reports)
        text += "\n" + summarize_reports(baseline_reports)
    print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    results = run_suite()
    print(format_results(results), end="")
    if all(r.passed for r in results):
        return EXIT_OK
    return EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uception",
        description="Desk-scale 3D CNN engine for sparse vessel segmentation.",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    base_spec = PhantomSpec()
    p = sub.add_parser("phantom", help="generate a synthetic tube-phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=12)
    p.add_argument("--n-val", type=int, default=1)
    p.add_argument("--n-test", type=int, default=3)
    p.add_argument("--extents", type=int, default=base_spec.extents[0])
    p.add_argument("--tubes", type=int, default=base_spec.tubes)
    p.add_argument("--blobs", type=int, default=base_spec.blobs)
    p.add_argument("--noise", type=float, default=base_spec.noise)
    p.add_argument("--seed", type=int, default=base_spec.seed)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train on a directory of (img, seg) pairs")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from train_state.npz in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one volume with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--patch", type=int, default=64)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted masks against truths")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--image", nargs="*", default=[],
                   help="raw images; adds the intensity-threshold baseline rows")
    p.add_argument("--baseline-fraction", type=float, default=0.70)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _IO_ERRORS as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UceptionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
