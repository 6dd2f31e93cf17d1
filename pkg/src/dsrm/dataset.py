"""Datasets on disk: images, head annotations, manifests, synthetic data.

Annotation schema (JSON): {"image": "<path>", "points": [[x, y], ...]}
with x = column, y = row, 0-indexed pixel units.

Manifest schema (JSON):
    {"name": "...",
     "records": [{"image": "...", "annotations": "...", "features": "..."?}, ...],
     "train": ["<image path>", ...]?,   # optional fixed split
     "test": ["<image path>", ...]?}
Paths are stored relative to the manifest file and resolved on load.

Images are binary PGM (P5) or PPM (P6); anything else goes through Pillow.
Synthetic images are written as 8-bit PGM so the grayscale channel-copy
path is exercised end to end.
"""

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .features import gray_to_rgb

# ---------------------------------------------------------------------------
# portable anymap images


def _read_pnm_header(blob, path):
    # magic, width, height, maxval tokens; '#' comments allowed between them
    pos = 2
    tokens = []
    while len(tokens) < 3:
        match = re.match(rb"(?:\s|#[^\n]*\n)*(\d+)", blob[pos:])
        if not match:
            raise FormatError(f"{path}: malformed PNM header")
        tokens.append(int(match.group(1)))
        pos += match.end()
    if not blob[pos:pos + 1].isspace():
        raise FormatError(f"{path}: malformed PNM header")
    width, height, maxval = tokens
    return width, height, maxval, pos + 1


def read_pnm(path):
    """Read a binary PGM/PPM into float64 in [0, 1]: (H, W) or (H, W, 3)."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    width, height, maxval, offset = _read_pnm_header(blob, path)
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    expected = count * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError(f"{path}: payload is {len(blob) - offset} bytes, "
                          f"expected {expected}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    data = data.astype(np.float64) / maxval
    if channels == 1:
        return data.reshape(height, width)
    return data.reshape(height, width, 3)


def write_pgm8(path, image):
    """Write a grayscale float image in [0, 1] as an 8-bit binary PGM."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    quantized = np.round(arr * 255.0).astype("u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def write_pgm16(path, values):
    """Write nonnegative values as a 16-bit PGM, max value mapped to 65535."""
    arr = np.asarray(values, dtype=np.float64)
    peak = arr.max()
    scaled = np.zeros_like(arr) if peak <= 0 else arr / peak * 65535.0
    quantized = np.round(scaled).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_image(path):
    """Load any supported image as (H, W, 3) float64 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        data = read_pnm(path)
        return gray_to_rgb(data) if data.ndim == 2 else data
    from PIL import Image  # lazy: PNM-only pipelines never import it

    with Image.open(path) as img:
        if img.mode == "L":
            return gray_to_rgb(np.asarray(img, dtype=np.float64) / 255.0)
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return rgb


# ---------------------------------------------------------------------------
# annotations


def load_annotations(path):
    """Head points [(x, y), ...] from an annotation JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(doc, dict) or "points" not in doc:
        raise FormatError(f"{path}: annotation JSON needs a 'points' array")
    points = []
    for entry in doc["points"]:
        if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
            raise FormatError(f"{path}: each point must be [x, y], got {entry!r}")
        points.append((float(entry[0]), float(entry[1])))
    return points


def save_annotations(path, image_name, points):
    doc = {"image": str(image_name), "points": [[float(x), float(y)] for x, y in points]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Record:
    image: Path
    annotations: Path
    features: Path | None = None


@dataclass
class Manifest:
    name: str
    records: list
    train: list = field(default_factory=list)  # image paths, resolved
    test: list = field(default_factory=list)
    root: Path = Path(".")

    def record_for(self, image_path):
        for rec in self.records:
            if rec.image == Path(image_path):
                return rec
        raise InputError(f"manifest has no record for image {image_path}")

    def split(self):
        """(train_records, test_records); no split means everything trains."""
        if not self.train and not self.test:
            return list(self.records), []
        by_image = {rec.image: rec for rec in self.records}
        return ([by_image[p] for p in self.train], [by_image[p] for p in self.test])


def load_manifest(path):
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from None
    root = path.parent
    records = []
    for k, entry in enumerate(doc.get("records", [])):
        if "image" not in entry or "annotations" not in entry:
            raise FormatError(f"{path}: record {k} needs 'image' and 'annotations'")
        rec = Record(
            image=(root / entry["image"]).resolve(),
            annotations=(root / entry["annotations"]).resolve(),
            features=(root / entry["features"]).resolve() if entry.get("features") else None,
        )
        for kind in ("image", "annotations", "features"):
            target = getattr(rec, kind)
            if target is not None and not target.exists():
                raise InputError(f"{path}: record {k} references missing {kind} {target}")
        records.append(rec)
    if not records:
        raise InputError(f"{path}: manifest has no records")

    def resolve_split(key):
        return [(root / p).resolve() for p in doc.get(key, [])]

    manifest = Manifest(name=doc.get("name", path.stem), records=records,
                        train=resolve_split("train"), test=resolve_split("test"),
                        root=root)
    if manifest.train or manifest.test:
        images = [rec.image for rec in records]
        listed = manifest.train + manifest.test
        if len(set(listed)) != len(listed):
            raise InputError(f"{path}: train/test splits overlap")
        if sorted(listed) != sorted(images):
            raise InputError(f"{path}: train/test splits must cover all records exactly")
    return manifest


def save_manifest(path, manifest):
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        return os.path.relpath(Path(p).resolve(), root)

    doc = {"name": manifest.name, "records": []}
    for rec in manifest.records:
        entry = {"image": rel(rec.image), "annotations": rel(rec.annotations)}
        if rec.features is not None:
            entry["features"] = rel(rec.features)
        doc["records"].append(entry)
    if manifest.train or manifest.test:
        doc["train"] = [rel(p) for p in manifest.train]
        doc["test"] = [rel(p) for p in manifest.test]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    n_images: int
    height: int = 160
    width: int = 160
    count_min: int = 10
    count_max: int = 100
    blob_sigma: float = 2.0
    blob_amplitude: float = 0.55  # constant: head mass carries the count signal
    noise: float = 0.05
    seed: int = 0
    name: str = "synthetic"
    train_count: int | None = None  # first K images become the train split

    def validate(self):
        if self.n_images < 1:
            raise InputError("n_images must be >= 1")
        if not 1 <= self.count_min <= self.count_max:
            raise InputError("need 1 <= count_min <= count_max")
        if self.blob_sigma <= 0:
            raise InputError("blob_sigma must be positive")
        # crude capacity check: blobs must not saturate the canvas
        if self.count_max * 9.0 * self.blob_sigma ** 2 > self.height * self.width:
            raise InputError("count range cannot fit the image without overflowing it")
        if self.train_count is not None and not 0 < self.train_count < self.n_images:
            raise InputError("train_count must split the dataset into two nonempty parts")
        return self


def _render_blob(image, x, y, sigma, amplitude):
    radius = int(np.ceil(3.0 * sigma))
    h, w = image.shape
    r0, r1 = max(int(y) - radius, 0), min(int(y) + radius + 1, h)
    c0, c1 = max(int(x) - radius, 0), min(int(x) + radius + 1, w)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    image[r0:r1, c0:c1] += amplitude * np.exp(
        -((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * sigma * sigma))


def generate_synthetic(spec, out_dir):
    """Render a deterministic synthetic dataset; returns the manifest path.

    Heads are bright Gaussian blobs on a dim noisy background; every
    rendered blob center is annotated, so annotation counts equal blob
    counts exactly.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    records = []
    margin = 1.0
    for k in range(spec.n_images):
        count = int(rng.integers(spec.count_min, spec.count_max + 1))
        image = rng.uniform(0.0, spec.noise, size=(spec.height, spec.width))
        points = []
        for _ in range(count):
            x = float(rng.uniform(margin, spec.width - margin))
            y = float(rng.uniform(margin, spec.height - margin))
            _render_blob(image, x, y, spec.blob_sigma, spec.blob_amplitude)
            points.append((x, y))
        np.clip(image, 0.0, 1.0, out=image)
        image_path = out_dir / f"img_{k:04d}.pgm"
        ann_path = out_dir / f"img_{k:04d}.json"
        write_pgm8(image_path, image)
        save_annotations(ann_path, image_path.name, points)
        records.append(Record(image=image_path.resolve(), annotations=ann_path.resolve()))
    train = test = []
    if spec.train_count is not None:
        train = [rec.image for rec in records[:spec.train_count]]
        test = [rec.image for rec in records[spec.train_count:]]
    manifest = Manifest(name=spec.name, records=records, train=train, test=test,
                        root=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, manifest)
    return manifest_path
