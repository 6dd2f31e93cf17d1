"""Horizontal spatial sequences over the deep-features matrix.

Every grid cell yields a length-3 sequence (left neighbor, itself, right
neighbor); edge columns replicate themselves in place of the missing
neighbor, and a single-column matrix replicates itself on both sides.
Only horizontal neighborhoods are serialized - vertical correlation is
deliberately not modeled.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class SpatialSequence:
    i: int
    j: int
    steps: np.ndarray  # (3, D): left, center, right


def neighbor_triples(m, n):
    """Flat (row-major) patch indices of (left, center, right) per cell: (m*n, 3)."""
    if m < 1 or n < 1:
        raise ContractViolation(f"feature matrix extents must be positive, got {m}x{n}")
    cols = np.arange(n)
    left = np.maximum(cols - 1, 0)
    right = np.minimum(cols + 1, n - 1)
    base = (np.arange(m) * n)[:, None]
    triples = np.stack([
        (base + left).ravel(),
        (base + cols).ravel(),
        (base + right).ravel(),
    ], axis=1)
    return triples


def sequence_array(values):
    """Stack an (m, n, D) feature matrix into (m*n, 3, D) sequences, row-major."""
    m, n, d = values.shape
    flat = values.reshape(m * n, d)
    return flat[neighbor_triples(m, n)]


def make_sequences(fm):
    """All spatial sequences of a feature matrix, in row-major cell order."""
    seqs = sequence_array(fm.values)
    n = fm.n
    return [SpatialSequence(i=k // n, j=k % n, steps=seqs[k]) for k in range(seqs.shape[0])]
