"""Count-level evaluation: MAE / MSE / MNAE, grouped comparisons, dataset
statistics, count histograms, and k-fold splitting.

MSE here is the root of the mean squared error - the robustness metric is
defined with the square root, and the formula wins over the label.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


def _pairs(gt, pred):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.ndim != 1 or gt.shape != pred.shape:
        raise ContractViolation(f"pair vectors disagree: {gt.shape} vs {pred.shape}")
    if gt.size == 0:
        raise ContractViolation("metrics over an empty pair set")
    if not (np.isfinite(gt).all() and np.isfinite(pred).all()):
        raise ContractViolation("metrics require finite values")
    return gt, pred


def mae(gt, pred):
    gt, pred = _pairs(gt, pred)
    return float(np.mean(np.abs(gt - pred)))


def mse(gt, pred):
    gt, pred = _pairs(gt, pred)
    return float(np.sqrt(np.mean((gt - pred) ** 2)))


def mnae(gt, pred):
    gt, pred = _pairs(gt, pred)
    if (gt == 0).any():
        raise ContractViolation(
            "MNAE is undefined for zero ground-truth counts; "
            "exclude those images explicitly (--mnae-skip-zero)")
    return float(np.mean(np.abs(gt - pred) / gt))


@dataclass
class GroupReport:
    sizes: np.ndarray  # images per group
    mean_gt: np.ndarray
    mean_pred: np.ndarray

    @property
    def k(self):
        return len(self.sizes)


def _near_equal_sizes(total, k):
    base, extra = divmod(total, k)
    return np.array([base + 1] * extra + [base] * (k - extra), dtype=np.int64)


def group_comparison(gt, pred, k=10):
    """Sort by true count ascending, split into k near-equal groups, average.

    Stable sort (ties keep original order); the first total-mod-k groups
    take the extra image.
    """
    gt, pred = _pairs(gt, pred)
    if gt.size < k:
        raise ContractViolation(f"{gt.size} images cannot fill {k} groups")
    order = np.argsort(gt, kind="stable")
    sizes = _near_equal_sizes(gt.size, k)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    mean_gt = np.empty(k)
    mean_pred = np.empty(k)
    for g in range(k):
        sel = order[bounds[g]:bounds[g + 1]]
        mean_gt[g] = gt[sel].mean()
        mean_pred[g] = pred[sel].mean()
    return GroupReport(sizes=sizes, mean_gt=mean_gt, mean_pred=mean_pred)


@dataclass
class DatasetStats:
    name: str
    n_images: int
    split: str  # "train/test" or a cross-validation marker like "5-fold"
    n_train: int | None
    n_test: int | None
    max_count: float
    min_count: float
    avg_count: float
    resolution: str  # "HxW" when uniform, else "different"

    def rows(self):
        """CSV-ready cells; the average is reported at 0.1 resolution."""
        return {
            "dataset": self.name,
            "N": self.n_images,
            "N_train": self.n_train if self.n_train is not None else self.split,
            "N_test": self.n_test if self.n_test is not None else "",
            "max": _trim(self.max_count),
            "min": _trim(self.min_count),
            "average": f"{self.avg_count:.1f}",
            "resolution": self.resolution,
        }


def _trim(x):
    return int(x) if float(x).is_integer() else x


def dataset_stats(counts, name="dataset", split="train/test", n_train=None, n_test=None,
                  resolutions=None):
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ContractViolation("dataset_stats over an empty dataset")
    if n_train is not None and n_test is not None and n_train + n_test != counts.size:
        raise ContractViolation("train/test split does not cover the dataset")
    if resolutions:
        uniform = len(set(resolutions)) == 1
        resolution = f"{resolutions[0][0]}x{resolutions[0][1]}" if uniform else "different"
    else:
        resolution = "unknown"
    return DatasetStats(
        name=name, n_images=int(counts.size), split=split,
        n_train=n_train, n_test=n_test,
        max_count=float(counts.max()), min_count=float(counts.min()),
        avg_count=float(counts.mean()), resolution=resolution,
    )


def count_histogram(counts, edges):
    """Occupancy of half-open bins [e_k, e_k+1), last bin closed."""
    counts = np.asarray(counts, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or (np.diff(edges) <= 0).any():
        raise ContractViolation("bin edges must be strictly increasing")
    if counts.size and (counts.min() < edges[0] or counts.max() > edges[-1]):
        raise ContractViolation(
            f"counts span [{counts.min()}, {counts.max()}] outside "
            f"edges [{edges[0]}, {edges[-1]}]")
    hist, _ = np.histogram(counts, bins=edges)
    return hist


def kfold_split(items, k=5, seed=0):
    """Seeded shuffle, then k contiguous near-equal folds of the items."""
    if k < 2:
        raise ContractViolation("k-fold needs k >= 2 (no held-out data otherwise)")
    if len(items) < k:
        raise ContractViolation(f"{len(items)} items cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    sizes = _near_equal_sizes(len(items), k)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [[items[i] for i in order[bounds[g]:bounds[g + 1]]] for g in range(k)]
