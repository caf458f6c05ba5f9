"""Dataset, checkpoint and config file formats.

Dataset CSV::

    label,s0,s1,...,s{m-1}
    2,0.0123,...

Values are written with 17 significant digits so doubles round-trip exactly.
Optional per-sample metadata lives in a separate CSV whose first column is
``index``.

Checkpoints are line-oriented text::

    vpnet-checkpoint
    format_version = 1
    [config]
    key = value
    [layer 0]
    kind = vp_feature
    dim.m = 100
    init.tau = 50
    params = 2
    <one value per line>
    end

Config files are ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, UnsupportedVersionError
from .nn import LayerSpec, Network

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = "vpnet-checkpoint"
_DECIMAL = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_INTEGER = re.compile(r"^[+-]?\d+$")


@dataclass
class LabeledDataset:
    """Signals (N x m), integer labels in ``[0, class_count)`` and optional metadata columns."""

    signals: np.ndarray
    labels: np.ndarray
    class_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signals.ndim != 2:
            raise ValueError("signals must be a 2-D array")
        if self.labels.shape != (self.signals.shape[0],):
            raise ValueError("need exactly one label per signal")
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("signals contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.signals.shape[0]

    @property
    def m(self) -> int:
        return self.signals.shape[1]

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.class_count).tolist()


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def parse_float(text: str, path=None, line=None) -> float:
    text = text.strip()
    if not _DECIMAL.match(text):
        raise DataFormatError(f"malformed numeric field {text!r}", path, line)
    return float(text)


def parse_int(text: str, path=None, line=None) -> int:
    text = text.strip()
    if not _INTEGER.match(text):
        raise DataFormatError(f"malformed integer field {text!r}", path, line)
    return int(text)


# -- datasets -------------------------------------------------------------------


def save_dataset(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"s{j}" for j in range(dataset.m)])
        for label, row in zip(dataset.labels, dataset.signals):
            w.writerow([int(label)] + [fmt(v) for v in row])


def load_dataset(path, class_count: int | None = None) -> LabeledDataset:
    """Strictly parse a dataset CSV.

    ``class_count`` defaults to ``max(label) + 1``; when given, labels outside
    ``[0, class_count)`` are rejected.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file", path)
    header = rows[0]
    m = len(header) - 1
    expected = ["label"] + [f"s{j}" for j in range(m)]
    if m < 1 or [h.strip() for h in header] != expected:
        raise DataFormatError("unknown header, expected label,s0,s1,...", path, 1)
    labels, signals = [], []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != m + 1:
            raise DataFormatError(f"row has {len(row) - 1} samples, expected {m}", path, i)
        label = parse_int(row[0], path, i)
        if label < 0 or (class_count is not None and label >= class_count):
            raise DataFormatError(f"label {label} out of range", path, i)
        labels.append(label)
        signals.append([parse_float(v, path, i) for v in row[1:]])
    if not labels:
        raise DataFormatError("no samples", path)
    if class_count is None:
        class_count = max(labels) + 1
    return LabeledDataset(np.array(signals, dtype=float), np.array(labels), class_count)


def save_metadata(metadata: dict, path) -> None:
    keys = list(metadata)
    n = len(next(iter(metadata.values()))) if keys else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + keys)
        for i in range(n):
            out = [i]
            for k in keys:
                v = metadata[k][i]
                out.append(int(v) if isinstance(v, (int, np.integer)) else fmt(v))
            w.writerow(out)


def load_metadata(path) -> dict:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "index":
        raise DataFormatError("metadata file must start with an index column", path, 1)
    keys = rows[0][1:]
    cols = {k: [] for k in keys}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(keys) + 1:
            raise DataFormatError("row length does not match header", path, i)
        for k, v in zip(keys, row[1:]):
            cols[k].append(parse_int(v, path, i) if _INTEGER.match(v.strip()) else parse_float(v, path, i))
    return {k: np.array(v) for k, v in cols.items()}


def load_heartbeats(path, window: int = 100) -> LabeledDataset:
    """Load pre-extracted heartbeat windows (0 = normal, 1 = ventricular ectopic).

    Filtering and R-peak alignment are the caller's job; only the window
    length and label set are validated.
    """
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        raise DataFormatError("empty file", path)
    ds = load_dataset(path, class_count=2)
    if ds.m != window:
        raise DataFormatError(f"heartbeat windows must have {window} samples, got {ds.m}", path)
    ds.class_count = 2
    return ds


# -- config files ------------------------------------------------------------------


def read_config(path, allowed: set[str] | None = None) -> dict[str, str]:
    """Read ``key = value`` lines; unknown keys raise :class:`ConfigError` when ``allowed`` is given."""
    path = Path(path)
    out = {}
    with path.open(encoding="utf-8") as fh:
        for i, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{i}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if allowed is not None and key not in allowed:
                raise ConfigError(f"{path}:{i}: unknown config key {key!r}")
            out[key] = value
    return out


def write_config(values: dict, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {_config_value(v)}\n")


def _config_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_config_value(x) for x in v)
    return str(v)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(network: Network, path, config: dict | None = None) -> None:
    lines = [CHECKPOINT_MAGIC, f"format_version = {FORMAT_VERSION}", "[config]"]
    for k, v in (config or {}).items():
        lines.append(f"{k} = {_config_value(v)}")
    for i, layer in enumerate(network.layers):
        spec = layer.spec
        lines.append(f"[layer {i}]")
        lines.append(f"kind = {spec.kind}")
        for k, v in spec.dims.items():
            lines.append(f"dim.{k} = {_config_value(v)}")
        for k, v in spec.init.items():
            lines.append(f"init.{k} = {_config_value(v)}")
        lines.append(f"params = {layer.n_params}")
        lines.extend(fmt(v) for v in layer.params)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _typed(text: str, path, line):
    if _INTEGER.match(text):
        return int(text)
    return parse_float(text, path, line)


def load_checkpoint(path) -> tuple[Network, dict]:
    """Returns (network, config dict of raw strings)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    pos = 0

    def take(expect_prefix=None):
        nonlocal pos
        if pos >= len(lines):
            raise DataFormatError("unexpected end of checkpoint", path, pos + 1)
        text = lines[pos]
        pos += 1
        if expect_prefix is not None and not text.startswith(expect_prefix):
            raise DataFormatError(f"expected {expect_prefix!r}, got {text!r}", path, pos)
        return text

    def key_value(text):
        if "=" not in text:
            raise DataFormatError(f"expected 'key = value', got {text!r}", path, pos)
        k, v = text.split("=", 1)
        return k.strip(), v.strip()

    if take() != CHECKPOINT_MAGIC:
        raise DataFormatError("not a vpnet checkpoint", path, 1)
    k, v = key_value(take("format_version"))
    version = parse_int(v, path, pos)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", path, pos)
    take("[config]")
    config = {}
    while pos < len(lines) and not lines[pos].startswith("[layer") and lines[pos] != "end":
        k, v = key_value(take())
        config[k] = v
    specs, params = [], []
    while True:
        text = take()
        if text == "end":
            break
        if not text.startswith("[layer"):
            raise DataFormatError(f"expected a layer section, got {text!r}", path, pos)
        kind = key_value(take("kind"))[1]
        dims, init = {}, {}
        while pos < len(lines) and (lines[pos].startswith("dim.") or lines[pos].startswith("init.")):
            k, v = key_value(take())
            target = dims if k.startswith("dim.") else init
            target[k.split(".", 1)[1]] = _typed(v, path, pos)
        count = parse_int(key_value(take("params"))[1], path, pos)
        values = [parse_float(take(), path, pos) for _ in range(count)]
        try:
            spec = LayerSpec(kind, dims, init)
        except ValueError as exc:
            raise DataFormatError(str(exc), path, pos) from None
        specs.append(spec)
        params.append(np.array(values))
    if not specs:
        raise DataFormatError("checkpoint has no layers", path)
    try:
        network = Network(specs, params=params)
    except (ValueError, KeyError) as exc:
        raise DataFormatError(f"inconsistent layer description: {exc}", path) from None
    return network, config


def finite_or_nan(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else fmt(v)
