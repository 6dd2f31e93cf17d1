"""Overlapping-window tiling, local ground truth, global counts, density maps.

Windows are patch_size x patch_size squares placed at multiples of the
stride; when the last stride-aligned window would stop short of the image
edge, one extra window is clamped flush against it. Every pixel of a valid
image is therefore covered by at least one window.

Local counts come in two modes. In "fractional" mode every annotated head
contributes 1/multiplicity to each window that contains it (multiplicity =
number of covering windows), so the plain sum of local counts equals the
head count exactly. "raw" mode counts heads per window without overlap
correction and exists for diagnostics only; aggregation refuses it.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InputError, ModeError

DEFAULT_PATCH_SIZE = 100
DEFAULT_STRIDE = 50


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch_size: int
    stride: int
    row_origins: np.ndarray  # top coordinates, ascending
    col_origins: np.ndarray  # left coordinates, ascending

    @property
    def rows(self):
        return len(self.row_origins)

    @property
    def cols(self):
        return len(self.col_origins)

    def origin(self, i, j):
        return int(self.row_origins[i]), int(self.col_origins[j])

    def windows(self):
        """Yield (i, j, top, left) in row-major order."""
        for i, r in enumerate(self.row_origins):
            for j, c in enumerate(self.col_origins):
                yield i, j, int(r), int(c)


@dataclass
class LocalCountMatrix:
    values: np.ndarray  # (rows, cols)
    mode: str  # "fractional" or "raw"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mode not in ("fractional", "raw"):
            raise ContractViolation(f"unknown local-count mode {self.mode!r}")


def _axis_origins(length, patch_size, stride):
    origins = list(range(0, length - patch_size + 1, stride))
    if origins[-1] + patch_size < length:
        origins.append(length - patch_size)
    return np.asarray(origins, dtype=np.int64)


def build_grid(height, width, patch_size=DEFAULT_PATCH_SIZE, stride=DEFAULT_STRIDE):
    if not (0 < stride <= patch_size):
        raise ContractViolation(f"stride must be in (0, patch_size], got {stride}")
    if height < patch_size or width < patch_size:
        raise InputError(
            f"image {height}x{width} is smaller than the {patch_size}px window; "
            "upscale or pad it first (the CLI offers --upscale-small)")
    return PatchGrid(
        height=int(height), width=int(width),
        patch_size=int(patch_size), stride=int(stride),
        row_origins=_axis_origins(height, patch_size, stride),
        col_origins=_axis_origins(width, patch_size, stride),
    )


def _axis_coverage(origins, patch_size, length):
    cov = np.zeros(length + 1, dtype=np.int64)
    for o in origins:
        cov[o] += 1
        cov[o + patch_size] -= 1
    return np.cumsum(cov[:-1])


def coverage_map(grid):
    """Per-pixel count of windows containing that pixel (always >= 1)."""
    rows = _axis_coverage(grid.row_origins, grid.patch_size, grid.height)
    cols = _axis_coverage(grid.col_origins, grid.patch_size, grid.width)
    return np.outer(rows, cols)


def _covering_indices(origins, patch_size, coord):
    lo = np.searchsorted(origins, coord - patch_size, side="right")
    hi = np.searchsorted(origins, coord, side="right")
    return np.arange(lo, hi)


def local_ground_truth(grid, points, mode="fractional"):
    """Local counts for head annotations, either fractional or raw."""
    if mode not in ("fractional", "raw"):
        raise ContractViolation(f"unknown local-count mode {mode!r}")
    values = np.zeros((grid.rows, grid.cols))
    for x, y in points:
        if not (0 <= x < grid.width and 0 <= y < grid.height):
            raise InputError(f"annotation ({x}, {y}) outside {grid.height}x{grid.width} image")
        ii = _covering_indices(grid.row_origins, grid.patch_size, y)
        jj = _covering_indices(grid.col_origins, grid.patch_size, x)
        weight = 1.0 if mode == "raw" else 1.0 / (len(ii) * len(jj))
        values[np.ix_(ii, jj)] += weight
    return LocalCountMatrix(values=values, mode=mode)


def global_count(counts):
    """Sum of clamped local counts; requires fractional mode."""
    if counts.mode != "fractional":
        raise ModeError("global_count needs fractional-mode counts; "
                        "raw sums overcount under overlap")
    return float(np.maximum(counts.values, 0.0).sum())


def assemble_density(grid, counts):
    """Spread each clamped local count over its window, inverse-coverage weighted.

    The deposit of window (i, j) sums to max(c_ij, 0), so the map's mass is
    global_count(counts).
    """
    if counts.mode != "fractional":
        raise ModeError("assemble_density needs fractional-mode counts")
    inv_cov = 1.0 / coverage_map(grid)
    density = np.zeros((grid.height, grid.width))
    p = grid.patch_size
    clamped = np.maximum(counts.values, 0.0)
    for i, j, top, left in grid.windows():
        c = clamped[i, j]
        if c == 0.0:
            continue
        w = inv_cov[top:top + p, left:left + p]
        density[top:top + p, left:left + p] += (c / w.sum()) * w
    return density


def gaussian_gt_density(height, width, points, sigma=4.0):
    """Ground-truth density map: one unit-mass truncated Gaussian per head.

    Kernels are cut at 3*sigma and renormalized after clipping at the image
    border, so the map mass equals the head count.
    """
    if sigma <= 0:
        raise ContractViolation("sigma must be positive")
    density = np.zeros((height, width))
    radius = int(np.ceil(3.0 * sigma))
    for x, y in points:
        r0 = max(int(np.floor(y)) - radius, 0)
        r1 = min(int(np.floor(y)) + radius + 1, height)
        c0 = max(int(np.floor(x)) - radius, 0)
        c1 = min(int(np.floor(x)) + radius + 1, width)
        yy, xx = np.mgrid[r0:r1, c0:c1]
        d2 = (yy - y) ** 2 + (xx - x) ** 2
        kernel = np.exp(-d2 / (2.0 * sigma * sigma))
        kernel[d2 > (3.0 * sigma) ** 2] = 0.0
        density[r0:r1, c0:c1] += kernel / kernel.sum()
    return density
