"""Per-patch feature extraction and the DSRF on-disk feature format.

Two backends fill the deep-features matrix: a small trainable CNN (three
3x3 conv stages, 3->8->16->32 channels, each conv followed by relu and a
2x2 max-pool, then global average pooling and a dense projection to D),
and precomputed feature files produced offline by a backbone exporter.

DSRF file layout (little-endian):
    bytes 0-3   magic "DSRF"
    bytes 4-7   version u32 == 1
    bytes 8-19  m, n, D as u32
    payload     m*n*D IEEE-754 float32, row-major in (i, j, d) order
    no trailing bytes
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractViolation, ExtractionError, FormatError

log = logging.getLogger(__name__)

DSRF_MAGIC = b"DSRF"
DSRF_VERSION = 1
PRECOMPUTED_DIM = 1000
DEFAULT_FEATURE_DIM = 64

_CHANNELS = (3, 8, 16, 32)
STD_FLOOR = 1e-8


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (m, n, D) float64
    backend_tag: str  # "tiny_cnn" or "precomputed"

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]


def gray_to_rgb(gray):
    """Replicate a single-channel image into three identical channels."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ContractViolation(f"expected a 2-d grayscale image, got shape {gray.shape}")
    return np.repeat(gray[:, :, None], 3, axis=2)


# ---------------------------------------------------------------------------
# tiny CNN backend


@dataclass
class TinyCnnParams:
    conv1_w: np.ndarray  # (3, 3, 3, 8)
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (3, 3, 8, 16)
    conv2_b: np.ndarray
    conv3_w: np.ndarray  # (3, 3, 16, 32)
    conv3_b: np.ndarray
    head_w: np.ndarray  # (32, D)
    head_b: np.ndarray  # (D,)

    @property
    def feature_dim(self):
        return self.head_w.shape[1]

    def tensors(self):
        """Named parameter blocks, in a fixed order."""
        return {
            "cnn.conv1_w": self.conv1_w, "cnn.conv1_b": self.conv1_b,
            "cnn.conv2_w": self.conv2_w, "cnn.conv2_b": self.conv2_b,
            "cnn.conv3_w": self.conv3_w, "cnn.conv3_b": self.conv3_b,
            "cnn.head_w": self.head_w, "cnn.head_b": self.head_b,
        }


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_tiny_cnn(feature_dim=DEFAULT_FEATURE_DIM, seed=0):
    rng = np.random.default_rng(seed)
    convs = []
    for cin, cout in zip(_CHANNELS[:-1], _CHANNELS[1:]):
        w = _glorot(rng, (3, 3, cin, cout), 9 * cin, 9 * cout)
        convs.append((w, np.zeros(cout)))
    head_w = _glorot(rng, (32, feature_dim), 32, feature_dim)
    return TinyCnnParams(
        conv1_w=convs[0][0], conv1_b=convs[0][1],
        conv2_w=convs[1][0], conv2_b=convs[1][1],
        conv3_w=convs[2][0], conv3_b=convs[2][1],
        head_w=head_w, head_b=np.zeros(feature_dim),
    )


def cnn_forward(params, x, want_cache=False):
    """Forward pass over a batch of windows x (B, H, W, 3) -> (B, D).

    With want_cache=True also returns the intermediates cnn_backward needs.
    relu is fused into the convolutions; its mask is the sign of the output.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    cache = {"x": x}
    cur = x
    for stage, (w, b) in enumerate(
            [(params.conv1_w, params.conv1_b),
             (params.conv2_w, params.conv2_b),
             (params.conv3_w, params.conv3_b)], start=1):
        r = kernels.conv3x3_forward(cur, w, b, relu=True)
        p, idx = kernels.maxpool2_forward(r)
        if want_cache:
            cache[f"in{stage}"] = cur
            cache[f"r{stage}"] = r
            cache[f"idx{stage}"] = idx
        cur = p
    gap = cur.mean(axis=(1, 2))
    feats = gap @ params.head_w + params.head_b
    if want_cache:
        cache["pool3"] = cur
        cache["gap"] = gap
        return feats, cache
    return feats


def cnn_backward(params, cache, dfeats):
    """Gradients of cnn_forward w.r.t. every parameter block."""
    gap = cache["gap"]
    grads = {
        "cnn.head_w": gap.T @ dfeats,
        "cnn.head_b": dfeats.sum(axis=0),
    }
    dcur = dfeats @ params.head_w.T
    p3 = cache["pool3"]
    _, h3, w3, _ = p3.shape
    dcur = np.broadcast_to(dcur[:, None, None, :] / (h3 * w3), p3.shape).copy()
    weights = {1: params.conv1_w, 2: params.conv2_w, 3: params.conv3_w}
    for stage in (3, 2, 1):
        r = cache[f"r{stage}"]
        dr = kernels.maxpool2_backward(cache[f"idx{stage}"],
                                       np.ascontiguousarray(dcur),
                                       r.shape[1], r.shape[2], gate=r)
        dcur, dw, db = kernels.conv3x3_backward(cache[f"in{stage}"], weights[stage],
                                                dr, want_dx=stage > 1)
        grads[f"cnn.conv{stage}_w"] = dw
        grads[f"cnn.conv{stage}_b"] = db
    return grads


def gather_windows(image, grid):
    """Stack the grid's windows of an (H, W, 3) image into (m*n, P, P, 3)."""
    p = grid.patch_size
    out = np.empty((grid.rows * grid.cols, p, p, 3))
    for k, (_, _, top, left) in enumerate(grid.windows()):
        out[k] = image[top:top + p, left:left + p, :]
    return out


def extract_features(image, grid, params, chunk=64):
    """Deterministic per-window forward pass into an (m, n, D) feature matrix."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] != grid.height or image.shape[1] != grid.width:
        raise ContractViolation("grid was built for a different image size")
    windows = gather_windows(image, grid)
    feats = np.empty((windows.shape[0], params.feature_dim))
    with kernels.blas_quiet():
        for s in range(0, windows.shape[0], chunk):
            block = cnn_forward(params, windows[s:s + chunk])
            bad = ~np.isfinite(block).all(axis=1)
            if bad.any():
                k = s + int(np.flatnonzero(bad)[0])
                raise ExtractionError(
                    f"non-finite activation at patch ({k // grid.cols}, {k % grid.cols})")
            feats[s:s + chunk] = block
    return FeatureMatrix(values=feats.reshape(grid.rows, grid.cols, params.feature_dim),
                         backend_tag="tiny_cnn")


# ---------------------------------------------------------------------------
# feature standardization


@dataclass
class FeatureStats:
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,), floored at STD_FLOOR


def fit_stats(matrices):
    """Per-dimension mean/std over a training set of feature matrices."""
    if not matrices:
        raise ContractViolation("fit_stats needs at least one feature matrix")
    dim = matrices[0].dim
    if any(fm.dim != dim for fm in matrices):
        raise ContractViolation("feature matrices disagree on dimensionality")
    stacked = np.concatenate([fm.values.reshape(-1, dim) for fm in matrices], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return FeatureStats(mean=mean, std=std)


def apply_stats(fm, stats):
    if fm.dim != stats.mean.shape[0]:
        raise ContractViolation(
            f"stats fitted for D={stats.mean.shape[0]}, features have D={fm.dim}")
    return FeatureMatrix(values=(fm.values - stats.mean) / stats.std,
                         backend_tag=fm.backend_tag)


# ---------------------------------------------------------------------------
# DSRF feature files


def save_features(path, fm):
    """Write an (m, n, D) feature matrix as a DSRF file (float32 payload)."""
    m, n, d = fm.values.shape
    payload = np.ascontiguousarray(fm.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(DSRF_MAGIC)
        fh.write(struct.pack("<IIII", DSRF_VERSION, m, n, d))
        fh.write(payload)


def load_precomputed(path):
    """Read a DSRF file, widening the float32 payload to float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise FormatError(f"{path}: too short for a DSRF header")
    if blob[:4] != DSRF_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, m, n, d = struct.unpack("<IIII", blob[4:20])
    if version != DSRF_VERSION:
        raise FormatError(f"{path}: unsupported DSRF version {version}")
    if m < 1 or n < 1 or d < 1:
        raise FormatError(f"{path}: degenerate dimensions ({m}, {n}, {d})")
    expected = m * n * d * 4
    if len(blob) - 20 != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - 20} bytes, header promises {expected}")
    if d != PRECOMPUTED_DIM:
        log.warning("%s: feature dimension %d (backbone files carry %d); accepted",
                    path, d, PRECOMPUTED_DIM)
    values = np.frombuffer(blob, dtype="<f4", offset=20).astype(np.float64)
    return FeatureMatrix(values=values.reshape(m, n, d), backend_tag="precomputed")
