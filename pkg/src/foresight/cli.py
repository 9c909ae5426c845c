"""Operator entry point: simulate -> fit-coherence -> build-stack ->
train/baseline -> predict -> evaluate -> report.

Every run writes a manifest capturing its full configuration, outputs
never overwrite without --force, and run directories are pure functions
of the inputs so a later `evaluate` can find what `train` produced.
Exit codes: 0 success, 1 data problems, 2 usage problems.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__, baselines, container, metrics, simulate, training
from .coherence import STATUS_NAMES, fit_decay_map, median_aggregate
from .errors import ConfigurationError, DataError, ForesightError, UsageError
from .models import ModelConfig
from .pipeline import (
    BandStats,
    apply_patch_stats,
    build_feature_stack,
    fit_patch_stats,
    load_reference,
    parse_combo,
    pixel_table,
    split_dataset,
    split_fingerprint,
    tile_patches,
)
from .raster import Raster, read_raster, write_raster

OUTPUT_ROOT_VAR = "FORESIGHT_OUTPUT_ROOT"
RUN_MANIFEST = "manifest.json"


def _root(args):
    return args.out_root or os.environ.get(OUTPUT_ROOT_VAR) or "."


def _combo_slug(combo):
    return combo.replace(",", "-").replace("+", "_")


def _run_dir(args, model):
    return os.path.join(
        _root(args),
        f"run_{model}_{_combo_slug(args.combo)}_{args.resolution}m"
        f"_s{args.seed}",
    )


def _guard_output(path, force):
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _write_manifest(out_dir, command, config):
    payload = {
        "command": command,
        "config": config,
        "version": {"package": __version__},
    }
    with open(os.path.join(out_dir, RUN_MANIFEST), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_run_manifest(run_dir):
    path = os.path.join(run_dir, RUN_MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no run manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args):
    out = args.out or os.path.join(_root(args), "scene")
    _guard_output(os.path.join(out, simulate.MANIFEST_NAME), args.force)
    config = simulate.SceneConfig(
        size=args.size,
        spacing=args.spacing,
        seed=args.seed,
        mean_height=args.mean_height,
        max_height=args.max_height,
        acquisitions=args.acquisitions,
        revisit_days=args.revisit,
        looks=args.looks,
        enl=args.enl,
        mask_fraction=args.mask_fraction,
    )
    simulate.simulate_stack(config, out)
    print(f"scene written to {out}")
    return 0


# -- fit-coherence -----------------------------------------------------------


def _scene_mask(scene_dir, manifest):
    mask = read_raster(
        os.path.join(scene_dir, manifest["bands"]["mask"])).values
    return mask > 0.5


def cmd_fit_coherence(args):
    manifest = simulate.read_manifest(args.scene)
    spacing = float(manifest["config"]["spacing"])
    valid = _scene_mask(args.scene, manifest)
    for pol in manifest["pols"]:
        _guard_output(os.path.join(args.scene, f"tau_{pol}.r32"), args.force)
    files = {}
    for pol in manifest["pols"]:
        pairs = [
            (float(e["lag"]),
             read_raster(os.path.join(args.scene, e["file"])).values)
            for e in manifest["coherence_pairs"] if e["pol"] == pol
        ]
        lags, stack = median_aggregate(pairs)
        out = fit_decay_map(lags, stack, mask=valid, workers=args.workers)
        products = {
            f"tau_{pol}": (out["tau"], "days"),
            f"rho_inf_{pol}": (out["rho_inf"], ""),
            f"residual_{pol}": (out["residual"], ""),
            f"status_{pol}": (out["status"].astype(np.float64), ""),
        }
        for name, (values, units) in products.items():
            path = os.path.join(args.scene, f"{name}.r32")
            write_raster(path, Raster(values, spacing, name, units))
            files[name] = f"{name}.r32"
    codes_path = os.path.join(args.scene, "status_codes.txt")
    with open(codes_path, "w", encoding="ascii") as fh:
        fh.write("status raster codes\n")
        for code, name in sorted(STATUS_NAMES.items()):
            fh.write(f"{code}\t{name}\n")
    with open(os.path.join(args.scene, "derived.json"), "w",
              encoding="utf-8") as fh:
        json.dump({
            "kind": "decay_products",
            "version": {"package": __version__},
            "files": files,
            "workers": args.workers,
        }, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"decay products written into {args.scene}")
    return 0


# -- build-stack --------------------------------------------------------------


def _assemble(args):
    stack = build_feature_stack(args.scene, args.combo, args.resolution)
    reference = load_reference(args.scene, args.resolution)
    return stack, reference


def cmd_build_stack(args):
    out = args.out or os.path.join(
        _root(args),
        f"stack_{_combo_slug(args.combo)}_{args.resolution}m.fsc",
    )
    _guard_output(out, args.force)
    stack, reference = _assemble(args)
    meta = {
        "kind": "feature_stack",
        "version": 1,
        "combo": stack.combo,
        "resolution": stack.resolution,
        "spacing": stack.spacing,
        "roles": list(stack.roles),
        "scene": os.path.abspath(args.scene),
    }
    container.save_container(out, meta, {
        "bands": stack.bands,
        "reference": reference,
    })
    print(f"stack with {len(stack.roles)} bands written to {out}")
    return 0


# -- shared train/baseline data preparation -----------------------------------


def _prepare_patches(args):
    stack, reference = _assemble(args)
    patches = tile_patches(stack, reference, size=args.patch_size)
    split = split_dataset(patches, args.seed)
    stats = fit_patch_stats(patches, split.train)
    normed = apply_patch_stats(patches, stats)
    fingerprint = split_fingerprint(split, patches)
    return stack, normed, split, stats, fingerprint


def _train_flags(args):
    return {
        "scene": os.path.abspath(args.scene),
        "combo": args.combo,
        "resolution": args.resolution,
        "seed": args.seed,
        "patch_size": args.patch_size,
    }


def cmd_train(args):
    run_dir = args.out or _run_dir(args, args.model)
    ckpt_path = os.path.join(run_dir, "checkpoint.ckpt")
    _guard_output(ckpt_path, args.force)
    stack, normed, split, stats, fingerprint = _prepare_patches(args)
    model_config = ModelConfig(
        arch=args.model,
        in_channels=len(stack.roles),
        levels=args.levels,
        base_channels=args.base_channels,
        se_reduction=args.se_reduction,
    )
    train_config = training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        patience=args.patience,
        seed=args.seed,
    )
    ckpt = training.train_model(
        model_config, normed, split, train_config,
        roles=stack.roles, stats=stats, combo=stack.combo,
        resolution=stack.resolution, fingerprint=fingerprint,
    )
    os.makedirs(run_dir, exist_ok=True)
    training.save_checkpoint(ckpt_path, ckpt)
    config = _train_flags(args)
    config.update({
        "model": args.model,
        "levels": args.levels,
        "base_channels": args.base_channels,
        "se_reduction": args.se_reduction,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "patience": args.patience,
    })
    _write_manifest(run_dir, "train", config)
    best = float(ckpt.log_val[ckpt.selection_epoch])
    print(f"checkpoint at {ckpt_path}; best validation loss {best:.4f}"
          f" (epoch {ckpt.selection_epoch})")
    return 0


def cmd_baseline(args):
    run_dir = args.out or _run_dir(args, args.model)
    model_path = os.path.join(run_dir, "model.fsb")
    _guard_output(model_path, args.force)
    stack, normed, split, stats, fingerprint = _prepare_patches(args)
    x, y = pixel_table(normed, split.train)
    if args.max_pixels and x.shape[0] > args.max_pixels:
        keep = np.random.default_rng(args.seed).choice(
            x.shape[0], size=args.max_pixels, replace=False)
        x, y = x[keep], y[keep]
    if args.model == "mlr":
        model = baselines.LinearRegressor()
    elif args.model == "knn":
        model = baselines.KNNRegressor(k=args.k)
    else:
        model = baselines.ForestRegressor(
            trees=args.trees,
            max_features=args.max_features,
            min_leaf=args.min_leaf,
            seed=args.seed,
            workers=args.workers,
        )
    model.fit(x, y)
    os.makedirs(run_dir, exist_ok=True)
    baselines.save_baseline(model_path, model)
    config = _train_flags(args)
    config.update({
        "model": args.model,
        "max_pixels": args.max_pixels,
        "stats_means": [float(v) for v in stats.means],
        "stats_stds": [float(v) for v in stats.stds],
        "fingerprint": fingerprint,
    })
    if args.model == "knn":
        config["k"] = args.k
    if args.model == "rf":
        config.update({"trees": args.trees, "min_leaf": args.min_leaf,
                       "max_features": args.max_features})
    _write_manifest(run_dir, "baseline", config)
    print(f"baseline model at {model_path}")
    return 0


# -- predict ------------------------------------------------------------------


def _find_checkpoint(args):
    candidate = args.model_path or os.path.join(
        _run_dir(args, args.model), "checkpoint.ckpt")
    if os.path.isdir(candidate):
        candidate = os.path.join(candidate, "checkpoint.ckpt")
    if not os.path.exists(candidate):
        raise DataError(f"checkpoint not found at {candidate}")
    return candidate


def cmd_predict(args):
    ckpt_path = _find_checkpoint(args)
    ckpt = training.load_checkpoint(ckpt_path)
    out = args.out or os.path.join(
        _root(args),
        f"pred_{ckpt.model_config.arch}_{_combo_slug(ckpt.combo)}"
        f"_{ckpt.resolution}m_s{ckpt.seed}.r32",
    )
    _guard_output(out, args.force)
    stack = build_feature_stack(args.scene, ckpt.combo, ckpt.resolution)
    pred = training.predict_raster(ckpt, stack)
    write_raster(out, pred)
    print(f"height map written to {out}")
    return 0


# -- evaluate -----------------------------------------------------------------


def _evaluate_deep(args, run_dir):
    ckpt_path = os.path.join(run_dir, "checkpoint.ckpt")
    if not os.path.exists(ckpt_path):
        raise DataError(f"checkpoint not found at {ckpt_path}")
    ckpt = training.load_checkpoint(ckpt_path)
    manifest = _read_run_manifest(run_dir)
    patch_size = int(manifest["config"].get("patch_size", 128))
    stack = build_feature_stack(args.scene, ckpt.combo, ckpt.resolution)
    reference = load_reference(args.scene, ckpt.resolution)
    patches = tile_patches(stack, reference, size=patch_size)
    split = split_dataset(patches, ckpt.seed)
    normed = apply_patch_stats(patches, ckpt.stats)
    return metrics.evaluate_checkpoint(ckpt, normed, split)


def _evaluate_baseline(args, run_dir):
    model_path = os.path.join(run_dir, "model.fsb")
    if not os.path.exists(model_path):
        raise DataError(f"checkpoint not found at {model_path}")
    model = baselines.load_baseline(model_path)
    manifest = _read_run_manifest(run_dir)
    config = manifest["config"]
    stats = BandStats(np.asarray(config["stats_means"]),
                      np.asarray(config["stats_stds"]))
    stack = build_feature_stack(args.scene, config["combo"],
                                config["resolution"])
    reference = load_reference(args.scene, config["resolution"])
    patches = tile_patches(stack, reference,
                           size=int(config["patch_size"]))
    split = split_dataset(patches, int(config["seed"]))
    fingerprint = split_fingerprint(split, patches)
    if fingerprint != config["fingerprint"]:
        raise UsageError(
            "split fingerprint mismatch: test patches are not the ones"
            " held out when this baseline was fitted"
        )
    normed = apply_patch_stats(patches, stats)
    return metrics.evaluate_baseline(
        model, config["model"], normed, split, combo=stack.combo,
        resolution=stack.resolution, seed=int(config["seed"]),
    )


def cmd_evaluate(args):
    run_dir = args.run or _run_dir(args, args.model)
    if args.model in ("mlr", "knn", "rf"):
        row, ref, pred = _evaluate_baseline(args, run_dir)
    else:
        row, ref, pred = _evaluate_deep(args, run_dir)
    report_path = os.path.join(run_dir, "report.csv")
    rows = (metrics.read_report(report_path)
            if os.path.exists(report_path) else [])
    rows.append(row)
    metrics.write_report(report_path, rows)
    metrics.write_scatter(os.path.join(run_dir, "scatter.tsv"), ref, pred)
    print(f"{row.model} {row.combo} {row.resolution}m: "
          f"ME {row.me_m:+.3f} m, RMSE {row.rmse_m:.3f} m, "
          f"R2 {row.r2:.3f} over {row.n_pixels} pixels")
    return 0


def cmd_report(args):
    rows = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "report.csv")
        if not os.path.exists(path):
            raise DataError(f"no report.csv in {run_dir}")
        rows.extend(metrics.read_report(path))
    text = metrics.format_matrix(rows)
    if args.out:
        _guard_output(args.out, args.force)
        metrics.write_report(args.out, rows)
    sys.stdout.write(text)
    return 0


# -- argument plumbing --------------------------------------------------------


def _add_common(p):
    p.add_argument("--out-root", default=None,
                   help=f"output root (default ${OUTPUT_ROOT_VAR} or .)")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")


def _add_stack_args(p):
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--combo", required=True,
                   help="feature combo, e.g. all,hh,hv or sigma+coh_all,hv")
    p.add_argument("--resolution", type=int, default=20,
                   choices=(20, 40, 60), help="mapping unit in meters")


def _add_split_args(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=128)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="foresight",
        description="forest height retrieval from simulated L-band"
                    " repeat-pass coherence and intensity",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene")
    _add_common(p)
    p.add_argument("--out", default=None, help="scene directory")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--spacing", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean-height", type=float, default=7.8)
    p.add_argument("--max-height", type=float, default=35.0)
    p.add_argument("--acquisitions", type=int, default=9)
    p.add_argument("--revisit", type=float, default=14.0)
    p.add_argument("--looks", type=float, default=None,
                   help="coherence estimator looks (default from spacing)")
    p.add_argument("--enl", type=float, default=10.0,
                   help="equivalent number of looks for speckle")
    p.add_argument("--mask-fraction", type=float, default=0.05)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-coherence",
                       help="invert decay model per pixel, write products")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_fit_coherence)

    p = sub.add_parser("build-stack", help="assemble a feature stack file")
    _add_common(p)
    _add_stack_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_build_stack)

    p = sub.add_parser("train", help="train a deep regression model")
    _add_common(p)
    _add_stack_args(p)
    _add_split_args(p)
    p.add_argument("--model", default="vanilla",
                   choices=("vanilla", "nested", "se"))
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--se-reduction", type=int, default=16)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--out", default=None, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="fit a pixelwise classical model")
    _add_common(p)
    _add_stack_args(p)
    _add_split_args(p)
    p.add_argument("--model", default="rf", choices=("mlr", "knn", "rf"))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--max-features", type=int, default=None)
    p.add_argument("--max-pixels", type=int, default=50000,
                   help="subsample cap on training pixels (0 = no cap)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None, help="run directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("predict", help="predict a full height map")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", default="vanilla",
                   help="model kind used to locate the default run dir")
    p.add_argument("--model-path", default=None,
                   help="explicit checkpoint file or run directory")
    p.add_argument("--combo", default="all,hh,hv")
    p.add_argument("--resolution", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a trained model on its"
                                        " held-out test patches")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", default="vanilla",
                   choices=("vanilla", "nested", "se", "mlr", "knn", "rf"))
    p.add_argument("--combo", default="all,hh,hv")
    p.add_argument("--resolution", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run", default=None,
                   help="run directory (default derived from flags)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate evaluation rows")
    _add_common(p)
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="combined CSV path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ForesightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
