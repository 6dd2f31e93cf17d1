"""Command-line interface.

Commands: synth, extract, train, predict, evaluate, finetune, kfold, stats.
Exit codes: 0 success, 1 input error, 2 internal error.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, features as features_mod, pipeline
from .checkpoint import save_checkpoint
from .config import load_config, serialize_config
from .dataset import (Manifest, Record, SyntheticSpec, generate_synthetic,
                      load_annotations, load_manifest, read_image, save_manifest,
                      write_pgm16)
from .errors import DsrmError, InputError
from .patches import gaussian_gt_density
from .training import finetune as finetune_train

log = logging.getLogger(__name__)


def _add_common(parser, *flags):
    if "config" in flags:
        parser.add_argument("--config", help="key=value run configuration file")
    if "seed" in flags:
        parser.add_argument("--seed", type=int, default=0, help="master RNG seed")
    if "manifest" in flags:
        parser.add_argument("--manifest", required=True, help="dataset manifest JSON")
    if "out" in flags:
        parser.add_argument("--out", required=True, help="output directory")
    if "backend" in flags:
        parser.add_argument("--backend", choices=["tiny_cnn", "precomputed"],
                            help="feature backend (overrides the config)")
    if "upscale" in flags:
        parser.add_argument("--upscale-small", action="store_true",
                            help="bilinearly enlarge images below the window size")
    if "split" in flags:
        parser.add_argument("--split", choices=["all", "train", "test"], default="all",
                            help="which manifest records to use")


def build_parser():
    parser = argparse.ArgumentParser(prog="dsrm",
                                     description="patch-based crowd counting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p, "out", "seed")
    p.add_argument("--n-images", type=int, required=True)
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--count-min", type=int, default=10)
    p.add_argument("--count-max", type=int, default=100)
    p.add_argument("--blob-sigma", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--train-count", type=int, default=None,
                   help="first K images become the train split")
    p.add_argument("--name", default="synthetic")

    p = sub.add_parser("extract", help="write DSRF feature files for a manifest")
    _add_common(p, "manifest", "out", "config", "seed", "backend", "upscale")

    p = sub.add_parser("train", help="train a counting model")
    _add_common(p, "manifest", "out", "config", "seed", "backend", "upscale")

    p = sub.add_parser("predict", help="count images with a trained model")
    _add_common(p, "out", "upscale", "split")
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--image", help="count a single image instead of a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--density-maps", action="store_true",
                   help="also write density maps as 16-bit PGM + mass sidecars")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _add_common(p, "manifest", "out", "config", "split")
    p.add_argument("--predictions", required=True, help="CSV from `dsrm predict`")
    p.add_argument("--mnae-skip-zero", action="store_true",
                   help="exclude zero-count images from MNAE instead of failing")

    p = sub.add_parser("finetune", help="fine-tune the LSTM blocks on a target domain")
    _add_common(p, "manifest", "out", "config", "seed", "upscale")
    p.add_argument("--checkpoint", required=True, help="source-domain checkpoint")

    p = sub.add_parser("kfold", help="k-fold cross-validation")
    _add_common(p, "manifest", "out", "config", "seed", "backend", "upscale")
    p.add_argument("--k", type=int, default=None, help="fold count (default from config)")

    p = sub.add_parser("stats", help="dataset statistics table")
    _add_common(p, "manifest")
    p.add_argument("--out", help="also write stats.csv here")
    p.add_argument("--name", default=None, help="dataset display name")
    p.add_argument("--cv-marker", default="5-fold",
                   help="split label when the manifest has no fixed split")

    return parser


def _records_for_split(manifest, split):
    if split == "all":
        return manifest.records
    train, test = manifest.split()
    if split == "train":
        return train
    if not test:
        raise InputError("manifest has no test split")
    return test


def _ensure_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "backend", None):
        cfg.backend = args.backend
    return cfg.validate()


def cmd_synth(args):
    spec = SyntheticSpec(n_images=args.n_images, height=args.height, width=args.width,
                         count_min=args.count_min, count_max=args.count_max,
                         blob_sigma=args.blob_sigma, noise=args.noise, seed=args.seed,
                         name=args.name, train_count=args.train_count)
    manifest_path = generate_synthetic(spec, _ensure_out(args))
    print(manifest_path)
    return 0


def cmd_extract(args):
    cfg = _config(args)
    if cfg.backend != "tiny_cnn":
        raise InputError("extract runs the tiny_cnn backend; precomputed features "
                         "come from the offline exporter")
    manifest = load_manifest(args.manifest)
    out = _ensure_out(args)
    seeds = pipeline.derive_seeds(args.seed)
    cnn = features_mod.init_tiny_cnn(cfg.feature_dim, seed=seeds["cnn"])
    new_records, failures = [], []
    for rec in manifest.records:
        target = out / (Path(rec.image).stem + ".dsrf")
        try:
            prep = pipeline.prepare_image(rec, cfg, args.upscale_small)
            fm = features_mod.extract_features(prep.image, prep.grid, cnn)
            features_mod.save_features(target, fm)
            new_records.append(Record(image=rec.image, annotations=rec.annotations,
                                      features=target.resolve()))
        except (DsrmError, OSError) as err:
            failures.append((rec.image, str(err)))
            new_records.append(rec)
    updated = Manifest(name=manifest.name, records=new_records,
                       train=manifest.train, test=manifest.test, root=out)
    save_manifest(out / "manifest.json", updated)
    print(f"extracted {len(new_records) - len(failures)}/{len(new_records)} records "
          f"-> {out / 'manifest.json'}")
    for path, err in failures:
        print(f"failed: {path}: {err}", file=sys.stderr)
    return 0


def cmd_train(args):
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    train_records, _ = manifest.split()
    if not train_records:
        raise InputError("manifest has no training records")
    out = _ensure_out(args)
    model, history = pipeline.train_model(train_records, cfg, args.seed,
                                          args.upscale_small)
    save_checkpoint(out / "model.dsrm", model.to_checkpoint())
    pipeline.write_history_csv(out / "history.csv", history)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    print(f"trained {history.epochs_run} epochs; final loss "
          f"{history.loss[-1]:.6g} -> {out / 'model.dsrm'}")
    return 0


def _predict_records(model, records, cfg, args, out):
    rows = []
    density_dir = out / "density"
    if args.density_maps:
        density_dir.mkdir(exist_ok=True)
    for rec in records:
        try:
            prep = pipeline.prepare_image(rec, cfg, args.upscale_small)
            count, _, density = model.predict(prep)
            rows.append((str(rec.image), repr(count), ""))
            if args.density_maps:
                stem = Path(rec.image).stem
                write_pgm16(density_dir / f"{stem}.pgm", density)
                (density_dir / f"{stem}.pgm.mass.txt").write_text(
                    repr(float(density.sum())) + "\n", encoding="utf-8")
                if prep.points:
                    gt_map = gaussian_gt_density(prep.image.shape[0], prep.image.shape[1],
                                                 prep.points, sigma=cfg.gt_sigma)
                    write_pgm16(density_dir / f"{stem}_gt.pgm", gt_map)
        except DsrmError as err:
            rows.append((str(rec.image), "", str(err)))
            print(f"failed: {rec.image}: {err}", file=sys.stderr)
    return rows


def cmd_predict(args):
    if bool(args.manifest) == bool(args.image):
        raise InputError("pass exactly one of --manifest or --image")
    cfg = _config(args)
    model = pipeline.Model.from_checkpoint_file(args.checkpoint)
    out = _ensure_out(args)
    if args.manifest:
        manifest = load_manifest(args.manifest)
        records = _records_for_split(manifest, args.split)
    else:
        image = Path(args.image)
        if not image.exists():
            raise InputError(f"image not found: {image}")
        records = [Record(image=image.resolve(), annotations=None)]
    rows = _predict_records(model, records, cfg, args, out)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "count", "error"])
        writer.writerows(rows)
    print(out / "predictions.csv")
    return 0


def _histogram_edges(gt, bins):
    lo, hi = float(gt.min()), float(gt.max())
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, bins + 1)


def cmd_evaluate(args):
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    records = _records_for_split(manifest, args.split)
    rows = pipeline.read_predictions_csv(args.predictions)
    gt, pred = pipeline.match_predictions(rows, records)
    out = _ensure_out(args)

    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in pipeline.metric_table(gt, pred, args.mnae_skip_zero):
            writer.writerow([name, repr(value)])

    report = evaluation.group_comparison(gt, pred, k=cfg.groups)
    with open(out / "groups.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_index", "mean_gt", "mean_pred"])
        for g in range(report.k):
            writer.writerow([g, repr(float(report.mean_gt[g])),
                             repr(float(report.mean_pred[g]))])

    edges = _histogram_edges(gt, cfg.bins)
    hist = evaluation.count_histogram(gt, edges)
    with open(out / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for k in range(len(hist)):
            writer.writerow([repr(float(edges[k])), repr(float(edges[k + 1])),
                             int(hist[k])])
    print(out / "metrics.csv")
    return 0


def cmd_finetune(args):
    cfg = _config(args)
    model = pipeline.Model.from_checkpoint_file(args.checkpoint)
    manifest = load_manifest(args.manifest)
    train_records, test_records = manifest.split()
    eval_records = test_records or train_records
    out = _ensure_out(args)
    seeds = pipeline.derive_seeds(args.seed)

    train_preps = [pipeline.prepare_image(r, cfg, args.upscale_small)
                   for r in train_records]
    eval_preps = [pipeline.prepare_image(r, cfg, args.upscale_small)
                  for r in eval_records]
    for prep in train_preps + eval_preps:
        fm_dim = model.feature_dim
        if model.extractor_tag == "precomputed" and prep.features_path is None:
            raise InputError(f"{prep.path}: checkpoint expects precomputed features "
                             f"of dimension {fm_dim}")

    def measure(current_model):
        counts = np.array([current_model.predict(p)[0] for p in eval_preps])
        truth = np.array([p.head_count for p in eval_preps])
        return pipeline.metric_table(truth, counts, skip_zero=False)

    zero_shot = measure(model)

    feats = [model.features_for(p) for p in train_preps]
    seqs, targets = pipeline.sequence_pairs(train_preps, feats, model.stats)
    freeze = cfg.freeze_set() if "freeze" in cfg.explicit else frozenset({"extractor"})
    tconf = pipeline.train_config_from(cfg, seeds["shuffle"], freeze)
    params, history = finetune_train(model.params, list(zip(seqs, targets)), tconf)
    tuned = pipeline.Model(params=params, stats=model.stats, cnn=model.cnn,
                           extractor_tag=model.extractor_tag)
    tuned_metrics = measure(tuned)

    save_checkpoint(out / "model.dsrm", tuned.to_checkpoint())
    pipeline.write_history_csv(out / "history.csv", history)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "zero_shot", "fine_tuned", "delta"])
        for (name, before), (_, after) in zip(zero_shot, tuned_metrics):
            writer.writerow([name, repr(before), repr(after), repr(after - before)])
    print(out / "report.csv")
    return 0


def cmd_kfold(args):
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    k = args.k if args.k is not None else cfg.kfold_k
    folds = evaluation.kfold_split(list(range(len(manifest.records))), k=k,
                                   seed=args.seed)
    out = _ensure_out(args)
    per_fold = []
    for f, fold in enumerate(folds):
        held = set(fold)
        train_records = [manifest.records[i] for i in range(len(manifest.records))
                         if i not in held]
        test_records = [manifest.records[i] for i in fold]
        model, _ = pipeline.train_model(train_records, cfg, args.seed,
                                        args.upscale_small)
        counts, truth = [], []
        for rec in test_records:
            prep = pipeline.prepare_image(rec, cfg, args.upscale_small)
            counts.append(model.predict(prep)[0])
            truth.append(prep.head_count)
        metrics = dict(pipeline.metric_table(np.array(truth), np.array(counts)))
        per_fold.append(metrics)
        log.info("fold %d/%d: mae=%.3f mse=%.3f", f + 1, k, metrics["mae"], metrics["mse"])

    with open(out / "kfold.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "mae", "mse", "mnae"])
        for f, metrics in enumerate(per_fold):
            writer.writerow([f, repr(metrics["mae"]), repr(metrics["mse"]),
                             repr(metrics["mnae"])])
        writer.writerow(["mean",
                         repr(float(np.mean([m["mae"] for m in per_fold]))),
                         repr(float(np.mean([m["mse"] for m in per_fold]))),
                         repr(float(np.mean([m["mnae"] for m in per_fold])))])
    print(out / "kfold.csv")
    return 0


def cmd_stats(args):
    manifest = load_manifest(args.manifest)
    counts, resolutions = [], []
    for rec in manifest.records:
        counts.append(len(load_annotations(rec.annotations)))
        image = read_image(rec.image)
        resolutions.append((image.shape[0], image.shape[1]))
    if manifest.train or manifest.test:
        split, n_train, n_test = "train/test", len(manifest.train), len(manifest.test)
    else:
        split, n_train, n_test = args.cv_marker, None, None
    stats = evaluation.dataset_stats(counts, name=args.name or manifest.name,
                                     split=split, n_train=n_train, n_test=n_test,
                                     resolutions=resolutions)
    row = stats.rows()
    print("\t".join(str(v) for v in row.values()))
    if args.out:
        out = _ensure_out(args)
        with open(out / "stats.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow(row)
        print(out / "stats.csv")
    return 0


_COMMANDS = {
    "synth": cmd_synth, "extract": cmd_extract, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "finetune": cmd_finetune,
    "kfold": cmd_kfold, "stats": cmd_stats,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InputError as err:
        print(f"error: input: {err}", file=sys.stderr)
        return 1
    except DsrmError as err:
        print(f"error: internal: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
