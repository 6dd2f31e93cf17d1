"""Model checkpoint files (magic "DSRM").

Layout (little-endian):
    bytes 0-3  magic "DSRM"
    u32        version == 1
    u32        extractor tag length, then that many UTF-8 bytes
    u32        feature dimension D
    u32        number of named blocks, then per block:
                   u32 name length + UTF-8 name
                   u32 ndim + ndim * u32 dims
                   float64 payload, row-major
Round-trips are bit-exact.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .features import TinyCnnParams
from .regressor import LstmLayerParams, RegressorParams

MAGIC = b"DSRM"
VERSION = 1


@dataclass
class Checkpoint:
    extractor_tag: str  # "tiny_cnn" or "precomputed"
    feature_dim: int
    blocks: dict  # name -> float64 ndarray


def _pack_block(fh, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        tag = ckpt.extractor_tag.encode("utf-8")
        fh.write(struct.pack("<II", VERSION, len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<II", ckpt.feature_dim, len(ckpt.blocks)))
        for name, arr in ckpt.blocks.items():
            _pack_block(fh, name, arr)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tag = r.take(r.u32()).decode("utf-8")
    feature_dim = r.u32()
    n_blocks = r.u32()
    blocks = {}
    for _ in range(n_blocks):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        blocks[name] = data.astype(np.float64)
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return Checkpoint(extractor_tag=tag, feature_dim=feature_dim, blocks=blocks)


# ---------------------------------------------------------------------------
# assembling model state into blocks and back


def blocks_from_model(params, stats, cnn=None):
    blocks = dict(params.tensors())
    blocks["stats.mean"] = stats.mean
    blocks["stats.std"] = stats.std
    blocks["meta.readout_center"] = np.array([1.0 if params.readout == "center" else 0.0])
    blocks["meta.hidden"] = np.array([params.layer1.hidden_size,
                                      params.layer2.hidden_size], dtype=np.float64)
    if cnn is not None:
        blocks.update(cnn.tensors())
    return blocks


def model_from_checkpoint(ckpt):
    """Rebuild (params, stats, cnn | None) from checkpoint blocks."""
    from .features import FeatureStats  # local to avoid cycle at import time

    b = ckpt.blocks
    try:
        h1, h2 = int(b["meta.hidden"][0]), int(b["meta.hidden"][1])
        readout = "center" if b["meta.readout_center"][0] == 1.0 else "last"
        layer1 = LstmLayerParams(b["lstm1.w"].shape[0], h1,
                                 b["lstm1.w"].copy(), b["lstm1.u"].copy(), b["lstm1.b"].copy())
        layer2 = LstmLayerParams(b["lstm2.w"].shape[0], h2,
                                 b["lstm2.w"].copy(), b["lstm2.u"].copy(), b["lstm2.b"].copy())
        params = RegressorParams(layer1, layer2, b["head.w"].copy(), b["head.b"].copy(),
                                 readout)
        stats = FeatureStats(mean=b["stats.mean"].copy(), std=b["stats.std"].copy())
        cnn = None
        if ckpt.extractor_tag == "tiny_cnn":
            cnn = TinyCnnParams(
                conv1_w=b["cnn.conv1_w"].copy(), conv1_b=b["cnn.conv1_b"].copy(),
                conv2_w=b["cnn.conv2_w"].copy(), conv2_b=b["cnn.conv2_b"].copy(),
                conv3_w=b["cnn.conv3_w"].copy(), conv3_b=b["cnn.conv3_b"].copy(),
                head_w=b["cnn.head_w"].copy(), head_b=b["cnn.head_b"].copy(),
            )
    except KeyError as missing:
        raise FormatError(f"checkpoint is missing block {missing}") from None
    return params, stats, cnn
