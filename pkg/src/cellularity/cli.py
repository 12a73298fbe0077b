"""``cellularity`` command line: one subcommand per pipeline stage.

Settings resolve as command-line flags, then a ``--config`` JSON file (flat
``{"flag_name": value}`` with underscores), then built-in defaults. Every run
writes a manifest with the resolved settings next to its output; the
``--threads`` and ``--quiet`` settings are left out so outputs do not depend
on them.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .annotations import AnnotationError, parse_annotations, synthesize_masks
from .features import N_FEATURES, SCHEMA_VERSION, describe_feature, extract_features
from .gbt import (GbtParams, ModelFormatError, cross_validate, feature_importance, fit, load_model,
                  save_model)
from .losses import LossConfig, gradient_check
from .metrics import ScorePairSet, bin4_array, evaluation_report
from .pmap import NUCLEUS_CHANNELS, PmapError, list_pmaps, load_pmap, save_pmap
from .synth import SynthParams, emit_dataset, generate
from .tables import TableError, read_features, read_id_values, read_targets, write_features, write_id_values

log = logging.getLogger("cellularity")

_RUNTIME_ONLY = {"threads", "quiet", "config", "func", "command"}


class UsageError(Exception):
    pass


def _map(fn, items, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_manifest(args, path) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _RUNTIME_ONLY}
    _write_json({"command": args.command, "version": __version__,
                 "feature_schema": SCHEMA_VERSION, "config": config}, path)


def _file_manifest(args, out_path) -> None:
    root, _ = os.path.splitext(out_path)
    _write_manifest(args, root + ".manifest.json")


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def cmd_synth_masks(args) -> int:
    if args.diameter <= 0:
        raise UsageError(f"--diameter must be positive, got {args.diameter}")
    if args.width < 1 or args.height < 1:
        raise UsageError("--width and --height must be positive")
    sets = parse_annotations(args.annotations, args.width, args.height)
    os.makedirs(args.out_dir, exist_ok=True)

    def one(ann):
        save_pmap(synthesize_masks(ann, args.width, args.height, args.diameter),
                  os.path.join(args.out_dir, f"{ann.patch_id}.pmap"))

    _map(one, sets, args.threads)
    _write_manifest(args, os.path.join(args.out_dir, "manifest.json"))
    log.info("wrote %d mask file(s) to %s", len(sets), args.out_dir)
    return 0


def cmd_extract(args) -> int:
    entries = list_pmaps(args.maps_dir)
    maps = _map(lambda e: load_pmap(e[1]), entries, args.threads)
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise UsageError(f"maps in {args.maps_dir} have mixed dimensions {sorted(shapes)}; "
                         "area features require one patch size per experiment")
    for (pid, _), m in zip(entries, maps):
        missing = [c for c in NUCLEUS_CHANNELS if c not in m]
        if missing:
            raise UsageError(f"map {pid} lacks channel(s) {missing}")
    X = _map(extract_features, maps, args.threads)
    ids = [pid for pid, _ in entries]
    targets = None
    if args.targets:
        table = read_targets(args.targets)
        absent = [pid for pid in ids if pid not in table]
        if absent:
            raise UsageError(f"no target for patch(es) {absent[:5]}")
        targets = [table[pid] for pid in ids]
    _ensure_parent(args.out)
    write_features(ids, np.array(X).reshape(len(ids), N_FEATURES), args.out, targets)
    _file_manifest(args, args.out)
    log.info("extracted %d feature row(s) to %s", len(ids), args.out)
    return 0


def cmd_train(args) -> int:
    ids, X, y, version = read_features(args.features)
    if y is None:
        raise UsageError(f"{args.features} has no target column")
    params = GbtParams(n_rounds=args.rounds, learning_rate=args.lr, max_depth=args.max_depth,
                       max_leaves=args.max_leaves, min_samples_leaf=args.min_leaf, seed=args.seed)
    model = fit(X, y, params, feature_schema=version)
    _ensure_parent(args.out)
    save_model(model, args.out)
    _file_manifest(args, args.out)
    pred = model.predict(X)
    train_mse = math.fsum(((pred - y) ** 2).tolist()) / len(y)
    print(f"training_mse {train_mse!r}")
    named = X.shape[1] == N_FEATURES and version in (None, SCHEMA_VERSION)
    for rank, (idx, gain) in enumerate(feature_importance(model)[:10], start=1):
        label = describe_feature(idx) if named else f"f{idx:03d}"
        print(f"{rank:2d} f{idx:03d} {label} {gain!r}")
    if args.cv_folds:
        groups = [pid.split(args.cv_group_sep, 1)[0] if args.cv_group_sep else pid for pid in ids]
        try:
            scores = cross_validate(X, y, groups, params, args.cv_folds)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        root, _ = os.path.splitext(args.out)
        _write_json({"folds": args.cv_folds, "group_sep": args.cv_group_sep, "fold_mse": scores,
                     "mean_mse": math.fsum(scores) / len(scores)}, root + ".cv.json")
        print(f"cv_mse {math.fsum(scores) / len(scores)!r} folds {' '.join(repr(v) for v in scores)}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    ids, X, _, version = read_features(args.features)
    if model.feature_schema is not None and version is not None and version != model.feature_schema:
        raise UsageError(f"feature schema {version} does not match the model's {model.feature_schema}")
    if X.shape[1] != model.n_features:
        raise UsageError(f"features have {X.shape[1]} columns, model expects {model.n_features}")
    pred = model.predict(X) if len(ids) else np.zeros(0)
    _ensure_parent(args.out)
    write_id_values(dict(zip(ids, pred)), args.out, "predicted")
    _file_manifest(args, args.out)
    return 0


def cmd_evaluate(args) -> int:
    pred = read_id_values(args.predictions, "predicted")
    ref = read_targets(args.targets)
    if set(pred) != set(ref):
        only_p = sorted(set(pred) - set(ref))[:5]
        only_r = sorted(set(ref) - set(pred))[:5]
        raise UsageError(f"patch ids differ: only in predictions {only_p}, only in targets {only_r}")
    ids = list(pred)
    s = ScorePairSet([pred[i] for i in ids], [ref[i] for i in ids], ids)
    report = evaluation_report(s, args.n_boot, args.seed)
    _ensure_parent(args.out)
    _write_json(report, args.out)
    root, _ = os.path.splitext(args.out)
    bp, br = bin4_array(s.predicted), bin4_array(s.reference)
    with open(root + ".per_patch.csv", "w", encoding="utf-8") as fh:
        fh.write("id,predicted,reference,bin_pred,bin_ref\n")
        for i, pid in enumerate(ids):
            fh.write(f"{pid},{float(s.predicted[i])!r},{float(s.reference[i])!r},{bp[i]},{br[i]}\n")
    _file_manifest(args, args.out)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_gen_synth(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    params = SynthParams(width=args.width, height=args.height, n_normal=tuple(args.n_normal),
                         n_lymphocyte=tuple(args.n_lymphocyte), n_malignant=tuple(args.n_malignant),
                         diameter=args.diameter, softness_sigma=args.softness,
                         map_noise_sigma=args.map_noise, label_noise_sigma=args.label_noise,
                         min_separation=args.min_separation, seed=args.seed)
    patches = generate(params, args.n, args.threads)
    emit_dataset(patches, args.out_dir, params)
    log.info("wrote %d synthetic patch(es) to %s", len(patches), args.out_dir)
    return 0


def cmd_loss_check(args) -> int:
    cfg = LossConfig(alpha=args.alpha)
    result = gradient_check(args.size, args.trials, args.seed, cfg, args.step)
    print(f"trials {result['trials']} max_rel_error {result['max_rel_error']!r}")
    if result["worst"] is not None:
        ch, r, c, g, fd = result["worst"]
        print(f"worst at {ch}[{r},{c}]: analytic {g!r} finite-difference {fd!r}")
    if result["max_rel_error"] >= args.tolerance:
        log.error("gradient check failed: %.3g >= %.3g", result["max_rel_error"], args.tolerance)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random stage (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-patch stages")
    common.add_argument("--quiet", action="store_true", help="only report errors")
    common.add_argument("--config", help="JSON file of default flag values")

    parser = argparse.ArgumentParser(prog="cellularity", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-masks", parents=[common], help="disk masks from point annotations")
    p.add_argument("annotations")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--diameter", type=float, default=15.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth_masks)

    p = sub.add_parser("extract", parents=[common], help="81 features per probability map")
    p.add_argument("--maps-dir", required=True)
    p.add_argument("--targets")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="fit boosted trees on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--rounds", type=int, default=600)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-depth", type=int, default=5)
    p.add_argument("--max-leaves", type=int, default=8)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--cv-folds", type=int, default=0,
                   help="also report k-fold held-out MSE (0 disables)")
    p.add_argument("--cv-group-sep", default="",
                   help="patches sharing the patch_id text before this separator share a fold "
                        "(empty: every patch is its own group)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="score a feature CSV with a model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="agreement report for predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--n-boot", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    d = SynthParams()
    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--width", type=int, default=d.width)
    p.add_argument("--height", type=int, default=d.height)
    p.add_argument("--n-normal", type=int, nargs=2, default=list(d.n_normal), metavar=("LO", "HI"))
    p.add_argument("--n-lymphocyte", type=int, nargs=2, default=list(d.n_lymphocyte), metavar=("LO", "HI"))
    p.add_argument("--n-malignant", type=int, nargs=2, default=list(d.n_malignant), metavar=("LO", "HI"))
    p.add_argument("--diameter", type=float, default=d.diameter)
    p.add_argument("--softness", type=float, default=d.softness_sigma)
    p.add_argument("--map-noise", type=float, default=d.map_noise_sigma)
    p.add_argument("--label-noise", type=float, default=d.label_noise_sigma)
    p.add_argument("--min-separation", type=float, default=d.min_separation)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("loss-check", parents=[common], help="finite-difference check of the loss gradient")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_loss_check)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            parser.error("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()
                            if k.replace("-", "_") in known})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cellularity {args.command}: {exc}", file=sys.stderr)
        return 2
    except (AnnotationError, PmapError, TableError, ModelFormatError, ValueError, OSError) as exc:
        print(f"cellularity {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
