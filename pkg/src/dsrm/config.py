"""Flat key=value run configuration with strict unknown-key rejection.

The canonical serialization (sorted keys, one "key=value" per line) parses
back byte-identically, which is what makes run configs reproducible
artifacts. Typos fail loudly.
"""

from dataclasses import dataclass, field, fields

from .errors import InputError

_BACKENDS = ("tiny_cnn", "precomputed")
_READOUTS = ("last", "center")
_FREEZE = ("extractor", "layer1", "layer2", "head")


@dataclass
class RunConfig:
    backend: str = "tiny_cnn"
    patch_size: int = 100
    stride: int = 50
    feature_dim: int = 64
    batch_size: int = 64
    epochs: int = 50
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze: str = ""  # comma-separated block names
    readout: str = "last"
    val_fraction: float = 0.1
    patience: int = 10
    groups: int = 10
    bins: int = 10
    kfold_k: int = 5
    gt_sigma: float = 4.0
    explicit: frozenset = field(default_factory=frozenset, compare=False)

    def freeze_set(self):
        return frozenset(p for p in self.freeze.split(",") if p)

    def validate(self):
        if self.backend not in _BACKENDS:
            raise InputError(f"backend must be one of {_BACKENDS}, got {self.backend!r}")
        if self.readout not in _READOUTS:
            raise InputError(f"readout must be one of {_READOUTS}, got {self.readout!r}")
        bad = self.freeze_set() - set(_FREEZE)
        if bad:
            raise InputError(f"freeze lists unknown blocks {sorted(bad)}; known: {_FREEZE}")
        if not 0 <= self.val_fraction < 1:
            raise InputError("val_fraction must lie in [0, 1)")
        for key in ("patch_size", "stride", "feature_dim", "batch_size", "epochs",
                    "groups", "bins", "kfold_k"):
            if getattr(self, key) < 1:
                raise InputError(f"{key} must be >= 1")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig) if f.name != "explicit"}


def parse_config(text):
    """Parse key=value lines (blank lines and # comments allowed)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise InputError(f"config line {lineno}: duplicate key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            values[key] = kind(value)
        except ValueError:
            raise InputError(f"config line {lineno}: {key} expects {kind.__name__}, "
                             f"got {value!r}") from None
    return RunConfig(**values, explicit=frozenset(values)).validate()


def serialize_config(cfg):
    """Canonical text form: every key, sorted, one per line."""
    lines = []
    for name in sorted(_FIELD_TYPES):
        value = getattr(cfg, name)
        lines.append(f"{name}={value!r}" if isinstance(value, float) else f"{name}={value}")
    return "\n".join(lines) + "\n"


def load_config(path):
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
