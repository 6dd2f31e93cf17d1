"""Training loops, fine-tuning, and whole-image prediction.

Two paths share the Adam machinery:

* train() fits the LSTM + head on fixed (sequence, target) samples with
  sequence-level shuffling. Used when features are precomputed or the
  extractor is frozen, and for fine-tuning (which freezes the extractor).
* train_joint() trains extractor and regressor together. Mini-batches are
  whole images (shuffled, packed until batch_size sequences) so every
  window passes through the CNN exactly once per epoch; gradients flow
  from the loss through the sequences back into the CNN.

Both are deterministic for a fixed (dataset order, config, seed).
"""

from dataclasses import dataclass, field

import numpy as np

from . import features as features_mod
from .kernels import blas_quiet
from . import regressor as reg_mod
from .errors import ContractViolation, DivergenceError
from .numerics import AdamState, adam_step
from .patches import LocalCountMatrix, assemble_density, global_count
from .spatial import neighbor_triples, sequence_array

FREEZE_BLOCKS = ("extractor", "layer1", "layer2", "head")
_PREFIX = {"extractor": "cnn.", "layer1": "lstm1.", "layer2": "lstm2.", "head": "head."}


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0
    freeze: frozenset = frozenset()
    patience: int = 10  # early-stop patience on validation MAE; <= 0 disables

    def validate(self):
        if self.batch_size < 1:
            raise ContractViolation("batch size must be >= 1")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        unknown = set(self.freeze) - set(FREEZE_BLOCKS)
        if unknown:
            raise ContractViolation(f"unknown freeze blocks: {sorted(unknown)}")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)  # per-epoch mean training loss
    val_mae: list = field(default_factory=list)  # empty unless validation data given

    @property
    def epochs_run(self):
        return len(self.loss)


def _frozen_prefixes(freeze):
    return tuple(_PREFIX[b] for b in sorted(freeze))


def _is_frozen(name, prefixes):
    return any(name.startswith(p) for p in prefixes)


class _Optimizer:
    """Adam over named parameter slots living on dataclass instances."""

    def __init__(self, slots, config, freeze):
        self.slots = slots  # name -> (owner, attr)
        self.prefixes = _frozen_prefixes(freeze)
        self.states = {
            name: AdamState.fresh(getattr(owner, attr).shape, lr=config.lr,
                                  beta1=config.beta1, beta2=config.beta2, eps=config.eps)
            for name, (owner, attr) in slots.items()
            if not _is_frozen(name, self.prefixes)
        }

    def step(self, grads):
        for name, state in self.states.items():
            owner, attr = self.slots[name]
            new_value, self.states[name] = adam_step(getattr(owner, attr), grads[name], state)
            setattr(owner, attr, new_value)


def _regressor_slots(params):
    return {
        "lstm1.w": (params.layer1, "w"), "lstm1.u": (params.layer1, "u"),
        "lstm1.b": (params.layer1, "b"),
        "lstm2.w": (params.layer2, "w"), "lstm2.u": (params.layer2, "u"),
        "lstm2.b": (params.layer2, "b"),
        "head.w": (params, "head_w"), "head.b": (params, "head_b"),
    }


def _cnn_slots(cnn):
    return {f"cnn.{f}": (cnn, f) for f in
            ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
             "head_w", "head_b")}


def _stack_pairs(dataset):
    seqs = np.stack([np.asarray(s.steps if hasattr(s, "steps") else s, dtype=np.float64)
                     for s, _ in dataset])
    targets = np.array([t for _, t in dataset], dtype=np.float64)
    return seqs, targets


def _should_stop(val_history, patience):
    if patience <= 0 or len(val_history) <= patience:
        return False
    best = min(val_history[:-patience])
    return min(val_history[-patience:]) >= best


def train(dataset, config, params, val=None):
    """Fit the regressor on (sequence, target) pairs. Returns (params, history).

    The input params are not mutated. Validation pairs, when given, drive
    the per-epoch MAE over local-count targets and early stopping.
    """
    config.validate()
    if len(dataset) == 0:
        raise ContractViolation("training dataset is empty")
    seqs, targets = _stack_pairs(dataset)
    if not np.isfinite(targets).all() or (targets < 0).any():
        raise ContractViolation("targets must be finite and >= 0")

    params = params.copy()
    optimizer = _Optimizer(_regressor_slots(params), config, config.freeze)
    rng = np.random.default_rng(config.shuffle_seed)
    n = len(dataset)
    history = TrainHistory()
    val_seqs = val_targets = None
    if val:
        val_seqs, val_targets = _stack_pairs(val)

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sse = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            take = perm[start:start + config.batch_size]
            try:
                bloss, grads, _ = reg_mod.backward_batch(seqs[take], targets[take], params)
            except DivergenceError as err:
                raise DivergenceError(f"epoch {epoch + 1}, batch {bi + 1}: {err}") from err
            optimizer.step(grads)
            sse += bloss * len(take)
        history.loss.append(sse / n)
        if val_seqs is not None:
            preds, _ = reg_mod.forward_batch(val_seqs, params)
            history.val_mae.append(float(np.mean(np.abs(preds - val_targets))))
            if _should_stop(history.val_mae, config.patience):
                break
    return params, history


def finetune(params, dataset, config, val=None):
    """Continue training from source-domain params; extractor stays frozen.

    At this level only LSTM blocks and the head exist, so this is train()
    initialized from the given params; the name marks the transfer step.
    """
    return train(dataset, config, params, val=val)


# ---------------------------------------------------------------------------
# joint extractor + regressor training


@dataclass
class TrainImage:
    """One training image prepared for the joint loop."""

    path: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    grid: object
    targets: np.ndarray  # (m*n,) fractional local counts, row-major
    head_count: float  # number of annotated heads

    def __post_init__(self):
        self.triples = neighbor_triples(self.grid.rows, self.grid.cols)

    @property
    def n_sequences(self):
        return self.targets.shape[0]


def _pack_batches(order, items, batch_size):
    """Group whole images until batch_size sequences are reached."""
    batches = []
    current, count = [], 0
    for idx in order:
        size = items[idx].n_sequences
        if current and count + size > batch_size:
            batches.append(current)
            current, count = [], 0
        current.append(idx)
        count += size
    if current:
        batches.append(current)
    return batches


def _gather_batch_windows(batch_items):
    patch = batch_items[0].grid.patch_size
    total = sum(it.n_sequences for it in batch_items)
    windows = np.empty((total, patch, patch, 3))
    base = 0
    for it in batch_items:
        for k, (_, _, top, left) in enumerate(it.grid.windows()):
            windows[base + k] = it.image[top:top + patch, left:left + patch, :]
        base += it.n_sequences
    return windows


def _joint_batch_step(batch_items, cnn, stats, params):
    windows = _gather_batch_windows(batch_items)
    feats, cache = features_mod.cnn_forward(cnn, windows, want_cache=True)
    std = (feats - stats.mean) / stats.std

    offsets = np.cumsum([0] + [it.n_sequences for it in batch_items])
    triples = np.concatenate([it.triples + base
                              for it, base in zip(batch_items, offsets[:-1])], axis=0)
    seqs = std[triples]
    targets = np.concatenate([it.targets for it in batch_items])

    bloss, grads, dseqs = reg_mod.backward_batch(seqs, targets, params)
    dstd = np.zeros_like(std)
    np.add.at(dstd, triples.ravel(), dseqs.reshape(-1, std.shape[1]))
    grads.update(features_mod.cnn_backward(cnn, cache, dstd / stats.std))
    return bloss, grads, targets.shape[0]


def predict_counts(items, cnn, stats, params):
    """Global counts for prepared images under the current joint model."""
    windows = _gather_batch_windows(items)
    feats = features_mod.cnn_forward(cnn, windows)
    std = (feats - stats.mean) / stats.std
    offsets = np.cumsum([0] + [it.n_sequences for it in items])
    triples = np.concatenate([it.triples + base
                              for it, base in zip(items, offsets[:-1])], axis=0)
    preds, _ = reg_mod.forward_batch(std[triples], params)
    clamped = np.maximum(preds, 0.0)
    return np.array([clamped[offsets[k]:offsets[k + 1]].sum() for k in range(len(items))])


def train_joint(items, config, params, cnn, stats, val_items=None):
    """Train extractor and regressor together on prepared images.

    Returns (params, cnn, history). Validation MAE is the per-image global
    count error over val_items.
    """
    config.validate()
    if not items:
        raise ContractViolation("training dataset is empty")
    if "extractor" in config.freeze:
        raise ContractViolation("joint training with a frozen extractor; "
                                "use the sequence-level trainer instead")

    params = params.copy()
    cnn = features_mod.TinyCnnParams(**{f: getattr(cnn, f).copy() for f in
                                        ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                                         "conv3_w", "conv3_b", "head_w", "head_b")})
    slots = {**_regressor_slots(params), **_cnn_slots(cnn)}
    optimizer = _Optimizer(slots, config, config.freeze)
    rng = np.random.default_rng(config.shuffle_seed)
    total = sum(it.n_sequences for it in items)
    history = TrainHistory()

    with blas_quiet():
        for epoch in range(config.epochs):
            order = rng.permutation(len(items))
            sse = 0.0
            for bi, batch in enumerate(_pack_batches(order, items, config.batch_size)):
                try:
                    bloss, grads, bsz = _joint_batch_step([items[i] for i in batch],
                                                          cnn, stats, params)
                except DivergenceError as err:
                    raise DivergenceError(f"epoch {epoch + 1}, batch {bi + 1}: {err}") \
                        from err
                optimizer.step(grads)
                sse += bloss * bsz
            history.loss.append(sse / total)
            if val_items:
                counts = predict_counts(val_items, cnn, stats, params)
                truth = np.array([it.head_count for it in val_items])
                history.val_mae.append(float(np.mean(np.abs(counts - truth))))
                if _should_stop(history.val_mae, config.patience):
                    break
    return params, cnn, history


# ---------------------------------------------------------------------------
# whole-image prediction


def predict_image(image, grid, extractor, stats, params):
    """Count an image: returns (global count, LocalCountMatrix, DensityMap).

    extractor is either TinyCnnParams (features are computed here) or an
    already-loaded FeatureMatrix (precomputed backend).
    """
    if isinstance(extractor, features_mod.FeatureMatrix):
        fm = extractor
        if (fm.m, fm.n) != (grid.rows, grid.cols):
            raise ContractViolation(
                f"precomputed features are {fm.m}x{fm.n}, grid is {grid.rows}x{grid.cols}")
    else:
        fm = features_mod.extract_features(image, grid, extractor)
    std = features_mod.apply_stats(fm, stats)
    preds, _ = reg_mod.forward_batch(sequence_array(std.values), params)
    values = np.maximum(preds, 0.0).reshape(grid.rows, grid.cols)
    counts = LocalCountMatrix(values=values, mode="fractional")
    return global_count(counts), counts, assemble_density(grid, counts)
