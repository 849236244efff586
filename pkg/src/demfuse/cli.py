"""``demfuse`` command line: every stage reads and writes plain files.

Exit codes: 0 success, 1 runtime or algorithmic failure, 2 usage or
validation error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from demfuse import align, fusion, metrics, mlp, pipeline, refine, synth
from demfuse.config import ConfigError, PipelineConfig, load_config
from demfuse.errors import DemFuseError, DivergenceError, InsufficientDataError
from demfuse.features import FeatureKind, extract_feature_table, parse_kinds, write_feature_table
from demfuse.raster import Grid, load_grid, require_same_geometry, save_grid

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments or inputs detected after parsing."""


def _grid(path: str, what: str) -> Grid:
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return load_grid(path)


def _optional_grid(path: str | None, what: str) -> Grid | None:
    return None if path is None else _grid(path, what)


def _model(path: str) -> mlp.MlpModel:
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    return mlp.load_model(path)


def _config(args, **overrides) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    return cfg.merged(overrides)


def _write_text(path: str | None, text: str) -> None:
    if path is not None:
        Path(path).write_text(text)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if not synth.valid_size(args.size):
        raise UsageError(f"--size must be 2**k + 1 (e.g. 129, 257), got {args.size}")
    presets = tuple(p.strip() for p in args.preset.split(","))
    if len(presets) != 2 or any(p not in synth.PRESETS for p in presets):
        raise UsageError(f"--preset needs two of {sorted(synth.PRESETS)}, comma separated")
    if not 0 <= args.density <= 1:
        raise UsageError("--density must lie in [0, 1]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = synth.make_scene(args.size, args.seed, presets, args.density, args.cellsize)
    files = {
        "truth": scene.truth,
        "dem_a": scene.dem_a,
        "dem_b": scene.dem_b,
        "hem_a": scene.sigma_a,
        "hem_b": scene.sigma_b,
    }
    for name, g in files.items():
        save_grid(g, out / f"{name}.asc")
    manifest = [
        f"size={args.size}",
        f"seed={args.seed}",
        f"cellsize={args.cellsize:g}",
        f"density={args.density:g}",
        f"preset_a={presets[0]}",
        f"preset_b={presets[1]}",
        *(f"{name}={name}.asc" for name in files),
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"wrote {len(files)} grids and manifest.txt to {out}")
    return EXIT_OK


def cmd_align(args) -> int:
    moving = _grid(args.moving, "moving")
    fixed = _grid(args.fixed, "fixed")
    identity = align.RigidTransform.identity()
    before = align.apply_transform(moving, identity, fixed.header)
    d0 = (before.values - fixed.values)
    if np.count_nonzero(~np.isnan(d0)) == 0:
        raise DivergenceError("moving and fixed grids do not overlap")
    t, _ = align.icp_register(moving, fixed, max_iters=args.max_iters, densify=args.densify)
    aligned = align.apply_transform(moving, t, fixed.header)
    d1 = aligned.values - fixed.values
    pre = metrics.rmse(d0[~np.isnan(d0)])
    post = metrics.rmse(d1[~np.isnan(d1)])
    t.save(args.transform)
    save_grid(aligned, args.out)
    print(f"pre_rmse={pre:.6g}")
    print(f"post_rmse={post:.6g}")
    print(f"yaw_deg={t.yaw_degrees:.6g}")
    print("translation=" + ",".join(f"{v:.6g}" for v in t.translation))
    return EXIT_OK


def cmd_features(args) -> int:
    dem = _grid(args.dem, "DEM")
    aux = _optional_grid(args.aux, "aux")
    cfg = _config(args, features=args.features)
    kinds = cfg.features
    if (FeatureKind.AUX in kinds) != (aux is not None):
        raise UsageError("--aux is required exactly when the aux feature is requested")
    table = extract_feature_table(dem, aux, kinds)
    with open(args.out, "w") as fh:
        write_feature_table(table, fh)
    print(f"{len(table)} pixels x {len(table.names)} features")
    return EXIT_OK


def cmd_residuals(args) -> int:
    dem = _grid(args.dem, "DEM")
    ref = _grid(args.reference, "reference")
    aux = _optional_grid(args.aux, "aux")
    cfg = _config(args, features=args.features, min_count=args.min_count)
    require_same_geometry(dem, ref, *([aux] if aux is not None else []))
    table = extract_feature_table(dem, aux, cfg.features)
    res, table = refine.compute_residuals(dem, ref, table)
    res, table = refine.remove_outliers(res, table)
    targets, specs = refine.smooth_targets(table, res, cfg.min_count)
    keep = ~np.isnan(targets)
    ts = refine.TrainingSet(table.values[keep], targets[keep], list(table.names),
                            table.pixel_indices[keep], table.shape)
    with open(args.out, "w") as fh:
        ts.write_csv(fh)
    if args.bins:
        with open(args.bins, "w") as fh:
            refine.write_bins_csv(specs, table.names, fh)
    print(f"{len(ts)} training samples ({len(res) - len(ts)} without a smoothed target)")
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = [pipeline.TrainingPair(_grid(args.dem, "DEM"), _grid(args.reference, "reference"),
                                   _optional_grid(args.aux, "aux"))]
    for dem, ref in args.also or []:
        pairs.append(pipeline.TrainingPair(_grid(dem, "DEM"), _grid(ref, "reference")))
    if args.aux is not None and args.also:
        raise UsageError("--aux cannot be combined with --also")
    cfg = _config(args, features=args.features, hidden=args.hidden, seed=args.seed,
                  max_epochs=args.max_epochs, min_count=args.min_count, max_samples=args.max_samples)
    kinds = list(cfg.features)
    if pairs[0].aux is not None and FeatureKind.AUX not in kinds:
        kinds.append(FeatureKind.AUX)
    if FeatureKind.AUX in kinds and pairs[0].aux is None:
        raise UsageError("the aux feature needs --aux")
    model, hist = pipeline.train_error_model(pairs, kinds, cfg.train_config(), cfg.min_count,
                                             cfg.max_samples or None)
    mlp.save_model(model, args.out)
    if args.history:
        _write_text(args.history, hist.to_csv())
    best = hist.best_epoch
    print(f"layers={','.join(str(n) for n in model.layer_sizes)}")
    print(f"epochs={len(hist.train_sse)} best_epoch={best}")
    print(f"train_sse={hist.train_sse[best]:.6g}")
    print(f"val_sse={hist.val_sse[best]:.6g}")
    print(f"test_sse={hist.test_sse:.6g}")
    print(f"test_correlation={hist.test_correlation:.4f}")
    if hist.dropped_features:
        print(f"dropped_constant_features={','.join(hist.dropped_features)}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _model(args.model)
    dem = _grid(args.dem, "DEM")
    aux = _optional_grid(args.aux, "aux")
    if FeatureKind.AUX in pipeline.model_kinds(model) and aux is None:
        raise UsageError("model uses the aux feature; pass --aux")
    err = pipeline.error_map(model, dem, aux)
    save_grid(err, args.out)
    vals = err.values[err.valid]
    print(f"predicted {vals.size} pixels, mean error {vals.mean() if vals.size else float('nan'):.4g}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    dem_a = _grid(args.dem_a, "DEM A")
    dem_b = _grid(args.dem_b, "DEM B")
    require_same_geometry(dem_a, dem_b)
    cfg = _config(args, scheme=args.scheme, error_floor=args.floor)
    if args.mode == "ann":
        if not args.models or args.hems:
            raise UsageError("--mode ann needs --models A B and no --hems")
        ma, mb = (_model(p) for p in args.models)
        aux_a = _optional_grid(args.aux_a, "aux A")
        aux_b = _optional_grid(args.aux_b, "aux B")
        fused, _, _ = pipeline.ann_fuse(dem_a, dem_b, ma, mb, aux_a, aux_b, cfg.scheme, cfg.error_floor)
    elif args.mode == "hem":
        if not args.hems or args.models:
            raise UsageError("--mode hem needs --hems A B and no --models")
        ha, hb = (_grid(p, "HEM") for p in args.hems)
        fused = fusion.fuse_hem_baseline(dem_a, dem_b, ha, hb, cfg.scheme, cfg.error_floor)
    else:
        if args.models or args.hems:
            raise UsageError("--mode average takes neither --models nor --hems")
        fused = fusion.fuse_plain_average(dem_a, dem_b)
    if args.mask:
        # mask = 1 marks pixels (e.g. lakes) taken from DEM B unchanged
        fused = fusion.substitute_by_mask(fused, dem_b, _grid(args.mask, "mask"))
    save_grid(fused, args.out)

    if args.truth:
        truth = _grid(args.truth, "truth")
        ra = metrics.accuracy_report(dem_a, truth)
        rb = metrics.accuracy_report(dem_b, truth)
        better = dem_a if ra.rmse <= rb.rmse else dem_b
        report = metrics.accuracy_report(fused, truth, baseline=better)
        text = report.to_text() + f"input_a_rmse={ra.rmse:.6g}\ninput_b_rmse={rb.rmse:.6g}\n"
        sys.stdout.write(text)
        _write_text(args.report, text)
    return EXIT_OK


def cmd_eval(args) -> int:
    dem = _grid(args.dem, "DEM")
    truth = _grid(args.truth, "truth")
    baseline = _optional_grid(args.baseline, "baseline")
    require_same_geometry(dem, truth, *([baseline] if baseline is not None else []))
    report = metrics.accuracy_report(dem, truth, baseline)
    text = report.to_text()
    sys.stdout.write(text)
    _write_text(args.out, text)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not widths or any(w < 1 for w in widths):
        raise argparse.ArgumentTypeError("layer widths must be positive")
    return widths


def _kinds(text: str) -> list[FeatureKind]:
    try:
        return parse_kinds(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_opt(sp):
        sp.add_argument("--config", help="key = value file; explicit flags take precedence")

    s = sub.add_parser("synth", help="generate a synthetic truth surface and two corrupted DEMs")
    s.add_argument("--size", type=int, default=257, help="grid side, 2**k + 1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preset", default="insar-like,optical-like", help="error presets for DEM A and DEM B")
    s.add_argument("--density", type=float, default=0.5, help="building cover fraction")
    s.add_argument("--cellsize", type=float, default=5.0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("align", help="register a moving DEM onto a fixed DEM by ICP")
    s.add_argument("moving")
    s.add_argument("fixed")
    s.add_argument("--transform", required=True, help="output transform file")
    s.add_argument("--out", required=True, help="aligned grid on the fixed geometry")
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--densify", type=int, default=align.DENSIFY, help="fixed-cloud upsampling factor")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("features", help="write the per-pixel feature table")
    s.add_argument("dem")
    s.add_argument("--aux")
    s.add_argument("--features", type=_kinds)
    s.add_argument("--out", required=True)
    config_opt(s)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("residuals", help="write refined training targets and per-bin curves")
    s.add_argument("dem")
    s.add_argument("reference")
    s.add_argument("--aux")
    s.add_argument("--features", type=_kinds)
    s.add_argument("--min-count", type=int)
    s.add_argument("--out", required=True, help="training CSV")
    s.add_argument("--bins", help="per-bin CSV")
    config_opt(s)
    s.set_defaults(func=cmd_residuals)

    s = sub.add_parser("train", help="train an error-prediction network")
    s.add_argument("dem")
    s.add_argument("reference")
    s.add_argument("--aux")
    s.add_argument("--also", nargs=2, action="append", metavar=("DEM", "REF"),
                   help="pool another DEM/reference pair into one general model")
    s.add_argument("--features", type=_kinds)
    s.add_argument("--hidden", type=_widths, help="hidden layer widths (default 20)")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--min-count", type=int)
    s.add_argument("--max-samples", type=int, help="random training subset size; 0 keeps all")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="model file")
    s.add_argument("--history", help="per-epoch SSE CSV")
    config_opt(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write a predicted error map for a DEM")
    s.add_argument("model")
    s.add_argument("dem")
    s.add_argument("--aux")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("fuse", help="fuse two DEMs")
    s.add_argument("dem_a")
    s.add_argument("dem_b")
    s.add_argument("--mode", choices=("ann", "hem", "average"), default="ann")
    s.add_argument("--models", nargs=2, metavar=("MODEL_A", "MODEL_B"))
    s.add_argument("--hems", nargs=2, metavar=("HEM_A", "HEM_B"))
    s.add_argument("--aux-a")
    s.add_argument("--aux-b")
    s.add_argument("--scheme", choices=fusion.SCHEMES)
    s.add_argument("--floor", type=float, help="error floor for inverse-square weights")
    s.add_argument("--mask", help="0/1 grid; 1 takes DEM B unchanged")
    s.add_argument("--truth", help="reference surface for an accuracy report")
    s.add_argument("--report", help="write the accuracy report here too")
    s.add_argument("--out", required=True)
    config_opt(s)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", help="accuracy of a DEM against a reference")
    s.add_argument("dem")
    s.add_argument("truth")
    s.add_argument("--baseline", help="DEM to count per-pixel improvements against")
    s.add_argument("--out", help="report file")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"demfuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DemFuseError, InsufficientDataError, DivergenceError) as exc:
        print(f"demfuse {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"demfuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
