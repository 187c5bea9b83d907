"""Dataset ingestion, normalization, windowing, and synthetic generators.

A dataset is a dense block of ``[instances x variables x timesteps]`` values
plus optional labels (one class id per instance, or one anomaly flag per
timestep) and a train/val/test tag per instance. CSV ingestion supports two
layouts: ``long`` (single file, instance id column) and ``per_instance``
(one file per instance, one row per timestep).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMode,
    EmptyTrainSplit,
    MissingColumn,
    NaNValue,
    NonNumericCell,
    RaggedLength,
    TsfuseError,
    WindowTooLong,
)

SPLITS = ("train", "val", "test")


@dataclass
class TimeSeriesDataset:
    """Labeled or unlabeled multivariate series with manifest metadata.

    values: float64 array [N, D, T]
    labels: None, int array [N] (label_kind="class"), or int array [N, T]
            of 0/1 flags (label_kind="anomaly")
    split_tag: array of "train"/"val"/"test" strings, one per instance
    manifest: dict with at least name, D, T, label_kind
    """

    values: np.ndarray
    labels: np.ndarray | None
    split_tag: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise TsfuseError(f"values must be [N, D, T], got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NaNValue("dataset values contain NaN/Inf")
        n, d, t = self.values.shape
        self.split_tag = np.asarray(self.split_tag)
        if self.split_tag.shape != (n,):
            raise TsfuseError("split_tag must have one entry per instance")
        for tag in np.unique(self.split_tag):
            if tag not in SPLITS:
                raise TsfuseError(f"unknown split tag {tag!r}")
        kind = self.label_kind
        if kind in ("class", "anomaly") and self.labels is None:
            raise TsfuseError(f"label_kind {kind!r} requires labels")
        if kind == "class":
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise TsfuseError("class labels must be [N]")
            if self.labels.min() < 0:
                raise TsfuseError("class labels must be non-negative integers")
        elif kind == "anomaly":
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n, t):
                raise TsfuseError("anomaly flags must be [N, T]")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise TsfuseError("anomaly flags must be 0/1")
        elif self.labels is not None:
            raise TsfuseError("labels present but manifest label_kind is 'none'")
        self.manifest = dict(self.manifest)
        self.manifest.setdefault("name", "unnamed")
        self.manifest["D"] = d
        self.manifest["T"] = t
        self.manifest.setdefault("label_kind", kind)

    @property
    def label_kind(self) -> str:
        kind = self.manifest.get("label_kind")
        if kind is None:
            kind = "none" if self.labels is None else "class"
        return kind

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def n_variables(self) -> int:
        return self.values.shape[1]

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[2]

    def split_indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split_tag == tag)

    def take(self, indices) -> "TimeSeriesDataset":
        """Subset by instance indices, keeping labels/tags aligned."""
        indices = np.asarray(indices)
        labels = None if self.labels is None else self.labels[indices]
        return TimeSeriesDataset(self.values[indices], labels,
                                 self.split_tag[indices], dict(self.manifest))


@dataclass
class NormalizationStats:
    """Per-variable mean/std computed on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise TsfuseError("normalization stddev entries must be strictly positive")


def datasets_equal(a: TimeSeriesDataset, b: TimeSeriesDataset) -> bool:
    if a.values.shape != b.values.shape or not np.array_equal(a.values, b.values):
        return False
    if not np.array_equal(a.split_tag, b.split_tag):
        return False
    if (a.labels is None) != (b.labels is None):
        return False
    if a.labels is not None and not np.array_equal(a.labels, b.labels):
        return False
    return a.label_kind == b.label_kind


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

def _parse_cell(raw: str, where: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise NonNumericCell(f"{where}: cannot parse {raw!r} as a number") from None
    if not math.isfinite(value):
        raise NaNValue(f"{where}: non-finite value {raw!r}")
    return value


def _value_columns(manifest: dict) -> list[str]:
    d = int(manifest["D"])
    return list(manifest.get("value_columns") or [f"var_{i}" for i in range(d)])


def _read_rows(csv_path: str):
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MissingColumn(f"{csv_path}: empty file, no header row")
        header = list(reader.fieldnames)
        rows = list(reader)
    return header, rows


def _require_columns(header, needed, csv_path):
    for col in needed:
        if col not in header:
            raise MissingColumn(f"{csv_path}: missing column {col!r}")


def load_csv(path: str, manifest: dict) -> TimeSeriesDataset:
    """Load a dataset from CSV per the manifest's layout declaration.

    For layout "long", ``path`` is one CSV with an instance-id column.
    For layout "per_instance", ``path`` is the directory holding the files
    listed under manifest["files"], each one instance (one row per timestep).
    """
    layout = manifest.get("layout", "long")
    t_expected = int(manifest["T"])
    value_cols = _value_columns(manifest)
    label_kind = manifest.get("label_kind", "none")
    label_col = manifest.get("label_column")
    split_col = manifest.get("split_column")
    if label_kind != "none" and not label_col:
        raise MissingColumn(f"manifest: label_kind={label_kind!r} but no label_column given")

    blocks: list[tuple[str, list[dict]]] = []
    if layout == "long":
        inst_col = manifest.get("instance_column", "instance")
        header, rows = _read_rows(path)
        _require_columns(header, [inst_col] + value_cols, path)
        if label_col:
            _require_columns(header, [label_col], path)
        order, grouped = [], {}
        for row in rows:
            key = row[inst_col]
            if key not in grouped:
                grouped[key] = []
                order.append(key)
            grouped[key].append(row)
        blocks = [(f"{path}[instance {k}]", grouped[k]) for k in order]
    elif layout == "per_instance":
        files = manifest.get("files")
        if not files:
            raise MissingColumn("manifest: per_instance layout requires a 'files' list")
        for fname in files:
            fpath = os.path.join(path, fname)
            header, rows = _read_rows(fpath)
            _require_columns(header, value_cols, fpath)
            if label_col:
                _require_columns(header, [label_col], fpath)
            blocks.append((fpath, rows))
    else:
        raise TsfuseError(f"manifest: unknown layout {layout!r}")

    n = len(blocks)
    values = np.empty((n, len(value_cols), t_expected), dtype=np.float64)
    class_labels = np.empty(n, dtype=np.int64)
    anomaly_labels = np.empty((n, t_expected), dtype=np.int64)
    split_tag = np.full(n, "train", dtype="<U8")

    for i, (where, rows) in enumerate(blocks):
        if len(rows) != t_expected:
            raise RaggedLength(f"{where}: expected T={t_expected} rows, found {len(rows)}")
        for t, row in enumerate(rows):
            for v, col in enumerate(value_cols):
                values[i, v, t] = _parse_cell(row[col], f"{where} row {t} column {col!r}")
            if label_kind == "anomaly":
                flag = _parse_cell(row[label_col], f"{where} row {t} column {label_col!r}")
                if flag not in (0.0, 1.0):
                    raise TsfuseError(f"{where} row {t}: anomaly flag must be 0 or 1, got {flag}")
                anomaly_labels[i, t] = int(flag)
        if label_kind == "class":
            raw = {row[label_col] for row in rows}
            if len(raw) != 1:
                raise TsfuseError(f"{where}: class label varies within one instance")
            class_labels[i] = int(float(raw.pop()))
        if split_col:
            tags = {row.get(split_col, "train") for row in rows}
            if len(tags) != 1:
                raise TsfuseError(f"{where}: split tag varies within one instance")
            split_tag[i] = tags.pop()

    labels = None
    if label_kind == "class":
        labels = class_labels
    elif label_kind == "anomaly":
        labels = anomaly_labels
    meta = {k: manifest[k] for k in ("name", "label_kind", "sampling_rate") if k in manifest}
    return TimeSeriesDataset(values, labels, split_tag, meta)


def write_csv(dataset: TimeSeriesDataset, out_dir: str, layout: str = "long") -> str:
    """Write a dataset plus manifest to ``out_dir``; returns the manifest path.

    Values are written with repr() so float64 round-trips exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    n, d, t = dataset.values.shape
    value_cols = [f"var_{i}" for i in range(d)]
    kind = dataset.label_kind
    manifest = {
        "name": dataset.manifest.get("name", "unnamed"),
        "D": d,
        "T": t,
        "layout": layout,
        "label_kind": kind,
        "label_column": "label" if kind != "none" else None,
        "split_column": "split",
        "files": None,
    }
    if "sampling_rate" in dataset.manifest:
        manifest["sampling_rate"] = dataset.manifest["sampling_rate"]

    def row_for(i, step):
        row = [repr(float(x)) for x in dataset.values[i, :, step]]
        if kind == "class":
            row.append(str(int(dataset.labels[i])))
        elif kind == "anomaly":
            row.append(str(int(dataset.labels[i, step])))
        row.append(str(dataset.split_tag[i]))
        return row

    header = list(value_cols)
    if kind != "none":
        header.append("label")
    header.append("split")

    if layout == "long":
        data_path = os.path.join(out_dir, "data.csv")
        with open(data_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance"] + header)
            for i in range(n):
                for step in range(t):
                    writer.writerow([str(i)] + row_for(i, step))
        manifest["files"] = ["data.csv"]
    elif layout == "per_instance":
        files = []
        for i in range(n):
            fname = f"instance_{i:05d}.csv"
            with open(os.path.join(out_dir, fname), "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                for step in range(t):
                    writer.writerow(row_for(i, step))
            files.append(fname)
        manifest["files"] = files
    else:
        raise TsfuseError(f"unknown layout {layout!r}")

    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest_path


def load_manifest(manifest_path: str) -> TimeSeriesDataset:
    """Read a manifest JSON and load the dataset it points to."""
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("name", "D", "T", "label_kind"):
        if key not in manifest:
            raise TsfuseError(f"manifest {manifest_path} lacks key {key!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    if manifest.get("layout", "long") == "long":
        files = manifest.get("files") or ["data.csv"]
        return load_csv(os.path.join(base, files[0]), manifest)
    return load_csv(base, manifest)


# --------------------------------------------------------------------------
# Normalization and windowing
# --------------------------------------------------------------------------

def zscore_normalize(dataset: TimeSeriesDataset,
                     stats: NormalizationStats | None = None,
                     ) -> tuple[TimeSeriesDataset, NormalizationStats]:
    """Z-score each variable using training-split statistics.

    Population stddev; constant variables keep std=1 so they map to zeros.
    When ``stats`` is given it is applied as-is (val/test path).
    """
    if stats is None:
        train_idx = dataset.split_indices("train")
        if train_idx.size == 0:
            raise EmptyTrainSplit("cannot compute normalization stats: no training instances")
        train_vals = dataset.values[train_idx]  # [n_train, D, T]
        mean = train_vals.mean(axis=(0, 2))
        std = train_vals.std(axis=(0, 2))  # population (ddof=0)
        std = np.where(std > 0, std, 1.0)
        stats = NormalizationStats(mean, std)
    normalized = (dataset.values - stats.mean[None, :, None]) / stats.std[None, :, None]
    out = TimeSeriesDataset(normalized, None if dataset.labels is None else dataset.labels.copy(),
                            dataset.split_tag.copy(), dict(dataset.manifest))
    return out, stats


def window_count(t: int, length: int, stride: int) -> int:
    return (t - length) // stride + 1


def make_windows(dataset: TimeSeriesDataset, length: int, stride: int) -> TimeSeriesDataset:
    """Slice every instance into windows; each window becomes an instance.

    Class labels are copied to every window of the source instance; anomaly
    flags are sliced alongside the values. Split tags are inherited.
    """
    n, d, t = dataset.values.shape
    if length > t:
        raise WindowTooLong(f"window length {length} exceeds series length {t}")
    if length < 1 or stride < 1:
        raise TsfuseError("window length and stride must be >= 1")
    starts = list(range(0, t - length + 1, stride))
    w = len(starts)
    assert w == window_count(t, length, stride)

    values = np.empty((n * w, d, length), dtype=np.float64)
    split_tag = np.empty(n * w, dtype=dataset.split_tag.dtype)
    kind = dataset.label_kind
    labels = None
    if kind == "class":
        labels = np.empty(n * w, dtype=np.int64)
    elif kind == "anomaly":
        labels = np.empty((n * w, length), dtype=np.int64)

    for i in range(n):
        for j, start in enumerate(starts):
            k = i * w + j
            values[k] = dataset.values[i, :, start:start + length]
            split_tag[k] = dataset.split_tag[i]
            if kind == "class":
                labels[k] = dataset.labels[i]
            elif kind == "anomaly":
                labels[k] = dataset.labels[i, start:start + length]

    manifest = dict(dataset.manifest)
    manifest["T"] = length
    return TimeSeriesDataset(values, labels, split_tag, manifest)


# --------------------------------------------------------------------------
# Synthetic generators
# --------------------------------------------------------------------------

def _split_tags(n_per_group: int) -> np.ndarray:
    """Deterministic roughly-50/25/25 split tags for one group of instances."""
    tags = np.full(n_per_group, "test", dtype="<U8")
    if n_per_group == 0:
        return tags
    if n_per_group == 1:
        return tags  # a lone instance goes to test
    if n_per_group == 2:
        tags[0] = "train"
        return tags
    n_val = max(1, round(0.25 * n_per_group))
    n_test = max(1, round(0.25 * n_per_group))
    n_train = n_per_group - n_val - n_test
    tags[:n_train] = "train"
    tags[n_train:n_train + n_val] = "val"
    return tags


def class_frequency_bins(n_classes: int, t: int) -> list[int]:
    """Frequency bin ladder 3, 7, 11, ... used by the spectral-only generator."""
    bins = [3 + 4 * k for k in range(n_classes)]
    if bins[-1] > t // 2 - 1:
        raise TsfuseError(f"T={t} too short for {n_classes} distinct frequency bins")
    return bins


def _bump_envelope(t: int) -> np.ndarray:
    """Raised-cosine bump over the first half of the series, floor 0.1."""
    env = np.full(t, 0.1)
    half = t // 2
    ramp = np.sin(np.pi * np.arange(half) / half) ** 2
    env[:half] += 0.9 * ramp
    return env


def synth_freq_classes(n_classes: int, n_per_class: int, D: int, T: int,
                       mode: str, noise_std: float, seed: int) -> TimeSeriesDataset:
    """Synthesize a labeled classification dataset.

    spectral-only: class identity = carrier frequency bin (flat envelope,
        random phase per slot shared across classes).
    temporal-only: one shared carrier; class identity = circular shift of a
        bump envelope, so magnitude spectra are identical across classes.
    mixed: first ceil(K/2) classes are frequency-coded on adjacent bins
        (flat envelope), the rest share one slower carrier and are
        envelope-shift-coded.
    """
    if n_classes < 2:
        raise TsfuseError("need at least 2 classes")
    if T < 32:
        raise TsfuseError("need T >= 32")
    if mode not in ("spectral-only", "temporal-only", "mixed"):
        raise BadMode(f"unknown mode {mode!r}")

    rng = np.random.default_rng(seed)
    steps = np.arange(T)
    # Phases are drawn per (slot, variable) and shared across classes so that
    # circular-shift-coded classes have exactly matching magnitude spectra.
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_per_class, D))

    if mode == "spectral-only":
        bins = class_frequency_bins(n_classes, T)
        freq_of_class = {k: bins[k] for k in range(n_classes)}
        env_shift_of_class = {k: None for k in range(n_classes)}
        shared_bin = None
    elif mode == "temporal-only":
        shared_bin = 4  # one carrier for everyone; identity lives in the envelope
        freq_of_class = {k: shared_bin for k in range(n_classes)}
        env_shift_of_class = {k: k * (T // n_classes) for k in range(n_classes)}
    else:  # mixed
        n_freq = (n_classes + 1) // 2
        n_env = n_classes - n_freq
        # Frequency-coded classes sit on adjacent high bins: locally the
        # waveforms are near-identical (a one-bin shift accumulates a single
        # cycle over the whole series), so only the spectrum separates them.
        # Envelope-coded classes share one slower carrier and differ by a
        # circular envelope shift, invisible in the magnitude spectrum.
        start = max(4, T // 6)
        bins = [start + k for k in range(n_freq)]
        if bins[-1] > T // 2 - 1:
            raise TsfuseError(f"T={T} too short for {n_freq} adjacent frequency bins")
        shared_bin = max(2, T // 12)
        freq_of_class = {}
        env_shift_of_class = {}
        for k in range(n_freq):
            freq_of_class[k] = bins[k]
            env_shift_of_class[k] = None
        for j in range(n_env):
            k = n_freq + j
            freq_of_class[k] = shared_bin
            env_shift_of_class[k] = j * (T // max(1, n_env))

    env = _bump_envelope(T)
    n = n_classes * n_per_class
    values = np.empty((n, D, T), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    split_tag = np.empty(n, dtype="<U8")
    group_tags = _split_tags(n_per_class)

    for k in range(n_classes):
        freq = freq_of_class[k]
        shift = env_shift_of_class[k]
        for j in range(n_per_class):
            i = k * n_per_class + j
            for v in range(D):
                carrier = np.sin(2.0 * np.pi * freq * steps / T + phases[j, v])
                signal = carrier if shift is None else np.roll(env * carrier, shift)
                values[i, v] = signal
            labels[i] = k
            split_tag[i] = group_tags[j]

    if noise_std > 0:
        values += noise_std * rng.standard_normal(values.shape)

    manifest = {"name": f"synth-{mode}", "label_kind": "class"}
    return TimeSeriesDataset(values, labels, split_tag, manifest)


def synth_anomaly_series(D: int, T: int, n_instances: int, spike_rate: float,
                         spike_magnitude: float, seed: int) -> TimeSeriesDataset:
    """Smooth low-frequency base signals with additive spikes at flagged steps.

    Training-split instances are spike-free (the anomaly protocol trains its
    decoder on normal data); val/test instances each carry exactly
    round(spike_rate * T) flagged timesteps.
    """
    if not 0 < spike_rate < 0.2:
        raise TsfuseError("spike_rate must lie in (0, 0.2)")
    rng = np.random.default_rng(seed)
    steps = np.arange(T)
    values = np.empty((n_instances, D, T), dtype=np.float64)
    labels = np.zeros((n_instances, T), dtype=np.int64)
    split_tag = _split_tags(n_instances)

    n_spikes = int(round(spike_rate * T))
    for i in range(n_instances):
        for v in range(D):
            base = np.zeros(T)
            for cycles in (1, 2, 3):
                amp = rng.uniform(0.4, 1.0)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                base += amp * np.sin(2.0 * np.pi * cycles * steps / T + phase)
            values[i, v] = base
        if split_tag[i] != "train" and n_spikes > 0:
            positions = rng.choice(T, size=n_spikes, replace=False)
            signs = rng.choice([-1.0, 1.0], size=n_spikes)
            labels[i, positions] = 1
            values[i, :, positions] += (spike_magnitude * signs)[:, None]

    manifest = {"name": "synth-anomaly", "label_kind": "anomaly"}
    return TimeSeriesDataset(values, labels, split_tag, manifest)


# --------------------------------------------------------------------------
# Processed container (output of `tsfuse ingest`)
# --------------------------------------------------------------------------

def save_container(dataset: TimeSeriesDataset, path: str,
                   stats: NormalizationStats | None = None) -> None:
    payload = {
        "values": dataset.values,
        "split_tag": dataset.split_tag,
        "manifest_json": np.array(json.dumps(dataset.manifest)),
    }
    if dataset.labels is not None:
        payload["labels"] = dataset.labels
    if stats is not None:
        payload["stats_mean"] = stats.mean
        payload["stats_std"] = stats.std
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_container(path: str) -> tuple[TimeSeriesDataset, NormalizationStats | None]:
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest_json"]))
        labels = z["labels"] if "labels" in z.files else None
        ds = TimeSeriesDataset(z["values"], labels, z["split_tag"], manifest)
        stats = None
        if "stats_mean" in z.files:
            stats = NormalizationStats(z["stats_mean"], z["stats_std"])
    return ds, stats
