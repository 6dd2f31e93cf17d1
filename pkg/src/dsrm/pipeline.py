"""End-to-end flows shared by the CLI commands: dataset preparation,
model construction for each backend, training, prediction, evaluation.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import evaluation, features as features_mod, regressor as reg_mod, training
from .checkpoint import (Checkpoint, blocks_from_model, load_checkpoint,
                         model_from_checkpoint, save_checkpoint)
from .dataset import load_annotations, read_image
from .errors import InputError
from .patches import build_grid, local_ground_truth
from .spatial import sequence_array
from .training import TrainConfig, TrainImage

log = logging.getLogger(__name__)


def derive_seeds(seed):
    """Stable per-purpose substreams of one user-facing seed."""
    children = np.random.SeedSequence(seed).spawn(4)
    gen = [int(c.generate_state(1)[0]) for c in children]
    return {"cnn": gen[0], "lstm": gen[1], "shuffle": gen[2], "split": gen[3]}


def upscale_to_patch(image, points, patch_size):
    """Bilinear-upscale an image whose short side is below the window size."""
    h, w = image.shape[:2]
    scale = patch_size / min(h, w)
    new_h, new_w = int(np.ceil(h * scale)), int(np.ceil(w * scale))
    channels = [ndimage.zoom(image[:, :, c], (new_h / h, new_w / w), order=1)
                for c in range(3)]
    scaled = np.clip(np.stack(channels, axis=2), 0.0, 1.0)
    pts = [(x * new_w / w, y * new_h / h) for x, y in points]
    return scaled, pts


@dataclass
class PreparedImage:
    path: Path
    image: np.ndarray  # (H, W, 3)
    grid: object
    points: list
    features_path: Path | None = None

    @property
    def head_count(self):
        return float(len(self.points))


def prepare_image(record, cfg, upscale_small=False):
    image = read_image(record.image)
    points = load_annotations(record.annotations) if record.annotations else []
    h, w = image.shape[:2]
    if min(h, w) < cfg.patch_size:
        if not upscale_small:
            raise InputError(
                f"{record.image}: {h}x{w} is below the {cfg.patch_size}px window; "
                "pass --upscale-small to bilinearly enlarge it")
        image, points = upscale_to_patch(image, points, cfg.patch_size)
        h, w = image.shape[:2]
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise InputError(f"{record.annotations}: point ({x}, {y}) outside {h}x{w} image")
    grid = build_grid(h, w, cfg.patch_size, cfg.stride)
    return PreparedImage(path=record.image, image=image, grid=grid, points=points,
                         features_path=record.features)


def to_train_image(prep):
    gt = local_ground_truth(prep.grid, prep.points, mode="fractional")
    return TrainImage(path=str(prep.path), image=prep.image, grid=prep.grid,
                      targets=gt.values.ravel(), head_count=prep.head_count)


def split_validation(items, val_fraction, seed):
    """Deterministic image-level validation carve-out."""
    n_val = int(round(len(items) * val_fraction))
    if n_val == 0 or n_val >= len(items):
        return items, []
    order = np.random.default_rng(seed).permutation(len(items))
    val_idx = set(order[:n_val].tolist())
    train = [it for k, it in enumerate(items) if k not in val_idx]
    val = [it for k, it in enumerate(items) if k in val_idx]
    return train, val


@dataclass
class Model:
    """Everything needed to count an image."""

    params: reg_mod.RegressorParams
    stats: features_mod.FeatureStats
    cnn: features_mod.TinyCnnParams | None
    extractor_tag: str

    @property
    def feature_dim(self):
        return self.params.input_dim

    def to_checkpoint(self):
        return Checkpoint(extractor_tag=self.extractor_tag,
                          feature_dim=self.feature_dim,
                          blocks=blocks_from_model(self.params, self.stats, self.cnn))

    @classmethod
    def from_checkpoint_file(cls, path):
        ckpt = load_checkpoint(path)
        params, stats, cnn = model_from_checkpoint(ckpt)
        return cls(params=params, stats=stats, cnn=cnn,
                   extractor_tag=ckpt.extractor_tag)

    def features_for(self, prep):
        if self.extractor_tag == "tiny_cnn":
            return features_mod.extract_features(prep.image, prep.grid, self.cnn)
        if prep.features_path is None:
            raise InputError(f"{prep.path}: precomputed backend needs a 'features' "
                             "entry in the manifest")
        fm = features_mod.load_precomputed(prep.features_path)
        if fm.dim != self.feature_dim:
            raise InputError(f"{prep.features_path}: feature dimension {fm.dim} does not "
                             f"match the model's {self.feature_dim}")
        return fm

    def predict(self, prep):
        fm = self.features_for(prep)
        return training.predict_image(prep.image, prep.grid, fm, self.stats, self.params)


def sequence_pairs(preps, model_feats, stats):
    """Pool (sequence, target) arrays over images given per-image features."""
    seqs, targets = [], []
    for prep, fm in zip(preps, model_feats):
        std = features_mod.apply_stats(fm, stats)
        seqs.append(sequence_array(std.values))
        gt = local_ground_truth(prep.grid, prep.points, mode="fractional")
        targets.append(gt.values.ravel())
    return np.concatenate(seqs), np.concatenate(targets)


def train_config_from(cfg, shuffle_seed, freeze):
    return TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.lr,
                       beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                       shuffle_seed=shuffle_seed, freeze=frozenset(freeze),
                       patience=cfg.patience)


def train_model(records, cfg, seed, upscale_small=False):
    """Train a full model per the run config. Returns (Model, TrainHistory).

    tiny_cnn backend trains extractor and regressor jointly unless the
    extractor is frozen; the precomputed backend always trains on fixed
    sequences loaded from DSRF files.
    """
    if not records:
        raise InputError("no training records")
    seeds = derive_seeds(seed)
    freeze = cfg.freeze_set()
    preps = [prepare_image(rec, cfg, upscale_small) for rec in records]

    if cfg.backend == "tiny_cnn":
        cnn = features_mod.init_tiny_cnn(cfg.feature_dim, seed=seeds["cnn"])
        feats = [features_mod.extract_features(p.image, p.grid, cnn) for p in preps]
    else:
        cnn = None
        feats = []
        for p in preps:
            if p.features_path is None:
                raise InputError(f"{p.path}: precomputed backend needs 'features' entries "
                                 "(run `dsrm extract` or the exporter first)")
            feats.append(features_mod.load_precomputed(p.features_path))
        dims = {fm.dim for fm in feats}
        if len(dims) > 1:
            raise InputError(f"precomputed features disagree on dimension: {sorted(dims)}")

    stats = features_mod.fit_stats(feats)
    params = reg_mod.init_regressor(feats[0].dim, seed=seeds["lstm"], readout=cfg.readout)
    tconf = train_config_from(cfg, seeds["shuffle"], freeze)

    if cfg.backend == "tiny_cnn" and "extractor" not in freeze:
        items = [to_train_image(p) for p in preps]
        train_items, val_items = split_validation(items, cfg.val_fraction, seeds["split"])
        params, cnn, history = training.train_joint(train_items, tconf, params, cnn,
                                                    stats, val_items=val_items)
        return Model(params, stats, cnn, "tiny_cnn"), history

    train_preps, val_preps = split_validation(list(zip(preps, feats)),
                                              cfg.val_fraction, seeds["split"])
    seqs, targets = sequence_pairs([p for p, _ in train_preps],
                                    [f for _, f in train_preps], stats)
    val = None
    if val_preps:
        vseqs, vtargets = sequence_pairs([p for p, _ in val_preps],
                                          [f for _, f in val_preps], stats)
        val = list(zip(vseqs, vtargets))
    params, history = training.train(list(zip(seqs, targets)), tconf, params, val=val)
    tag = cfg.backend if cfg.backend == "precomputed" else "tiny_cnn"
    return Model(params, stats, cnn, tag), history


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_mae"])
        for k, loss_value in enumerate(history.loss):
            val = repr(history.val_mae[k]) if k < len(history.val_mae) else ""
            writer.writerow([k + 1, repr(loss_value), val])


def read_predictions_csv(path):
    """Rows of (path, count | None, error) from a predictions file."""
    rows = []
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "path" not in reader.fieldnames \
                    or "count" not in reader.fieldnames:
                raise InputError(f"{path}: predictions CSV needs 'path' and 'count' columns")
            for row in reader:
                count = float(row["count"]) if row["count"] else None
                rows.append((row["path"], count, row.get("error", "")))
    except FileNotFoundError:
        raise InputError(f"predictions file not found: {path}") from None
    return rows


def match_predictions(rows, records):
    """Pair prediction rows with manifest records 1:1 by image path."""
    by_path = {}
    for p, count, err in rows:
        if p in by_path:
            raise InputError(f"duplicate prediction row for {p}")
        by_path[p] = (count, err)
    wanted = [str(rec.image) for rec in records]
    missing = [p for p in wanted if p not in by_path]
    failed = [p for p in wanted if p in by_path and by_path[p][0] is None]
    extra = [p for p in by_path if p not in set(wanted)]
    if missing or extra or failed:
        parts = []
        if missing:
            parts.append(f"missing rows: {missing}")
        if failed:
            parts.append(f"error rows: {failed}")
        if extra:
            parts.append(f"unexpected rows: {extra}")
        raise InputError("predictions do not match the manifest 1:1 (" + "; ".join(parts) + ")")
    counts = np.array([by_path[p][0] for p in wanted], dtype=np.float64)
    truth = np.array([len(load_annotations(rec.annotations)) for rec in records],
                     dtype=np.float64)
    return truth, counts


def metric_table(gt, pred, skip_zero=False):
    """MAE/MSE/MNAE rows; optionally drop zero-count images for MNAE only."""
    rows = [("mae", evaluation.mae(gt, pred)), ("mse", evaluation.mse(gt, pred))]
    nz = gt > 0
    if skip_zero and not nz.all():
        dropped = int((~nz).sum())
        log.warning("MNAE: excluding %d zero-count image(s)", dropped)
        rows.append(("mnae", evaluation.mnae(gt[nz], pred[nz])))
    else:
        rows.append(("mnae", evaluation.mnae(gt, pred)))
    return rows
