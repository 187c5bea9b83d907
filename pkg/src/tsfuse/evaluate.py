"""Downstream task heads and representation diagnostics.

All heads operate on frozen checkpoint snapshots: a deterministic forward
pass (no augmentation) produces representations, and the heads themselves
are deterministic solvers (lbfgs logistic regression, closed-form ridge) so
results depend only on (checkpoint, dataset).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import average_precision_score

from .augment import dropout_augment
from .data import TimeSeriesDataset, make_windows, window_count
from .errors import (
    HorizonExceedsData,
    NoAnomaliesInTest,
    SingleClassSplit,
    TooFewSamples,
    TsfuseError,
)
from .train import Checkpoint

_METRIC_RANGES = {
    "accuracy": (0.0, 1.0), "auprc": (0.0, 1.0), "precision": (0.0, 1.0),
    "recall": (0.0, 1.0), "f1": (0.0, 1.0),
}


@dataclass
class TaskReport:
    """Task kind, metrics, and the config that produced them."""

    kind: str
    metrics: dict
    config: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __post_init__(self):
        for name, value in self.metrics.items():
            base = name.split("@")[0]
            if base in _METRIC_RANGES and value is not None:
                lo, hi = _METRIC_RANGES[base]
                if not lo <= value <= hi:
                    raise TsfuseError(f"metric {name}={value} outside [{lo}, {hi}]")
            if base in ("mse", "mae") and value is not None and value < 0:
                raise TsfuseError(f"metric {name}={value} must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "metrics": self.metrics,
                "config": self.config, "notes": self.notes}


@dataclass
class RepresentationSet:
    """Flat representations with their labels and split tags."""

    reps: np.ndarray  # [N, dim]
    labels: np.ndarray | None
    split_tag: np.ndarray
    unit_norm: bool = True

    def __post_init__(self):
        self.reps = np.asarray(self.reps, dtype=np.float64)
        if self.reps.ndim != 2:
            raise TsfuseError("representations must be [N, dim]")
        if self.unit_norm:
            norms = np.linalg.norm(self.reps, axis=1)
            if np.max(np.abs(norms - 1)) > 1e-9:
                raise TsfuseError("representation rows must be unit-norm")

    def split(self, tag: str):
        mask = self.split_tag == tag
        labels = None if self.labels is None else self.labels[mask]
        return self.reps[mask], labels


MAP_KINDS = ("flat", "F_t0", "F_s0", "F_t", "F_s")


def extract_feature_maps(checkpoint: Checkpoint, dataset: TimeSeriesDataset,
                         which: str = "flat", chunk: int = 64) -> np.ndarray:
    """Per-instance features from a frozen model, no augmentation applied.

    Multivariate instances are encoded one variable at a time and averaged;
    "flat" rows are re-normalized to unit length after averaging.
    """
    if which not in MAP_KINDS:
        raise TsfuseError(f"unknown feature map {which!r}")
    model = checkpoint.build_model()
    model.eval()
    n, d_vars, _ = dataset.values.shape
    rows = []
    with torch.no_grad():
        for start in range(0, n, chunk):
            block = torch.as_tensor(dataset.values[start:start + chunk],
                                    dtype=torch.float64)
            per_var = []
            for v in range(d_vars):
                maps = model.forward_maps(block[:, v:v + 1, :])
                out = maps["feature"].flat if which == "flat" else maps[which]
                per_var.append(out.numpy())
            mean = np.mean(per_var, axis=0)
            rows.append(mean.reshape(mean.shape[0], -1))
    reps = np.concatenate(rows, axis=0)
    if which == "flat":
        reps = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    return reps


def extract_representations(checkpoint: Checkpoint,
                            dataset: TimeSeriesDataset) -> RepresentationSet:
    reps = extract_feature_maps(checkpoint, dataset, "flat")
    return RepresentationSet(reps, dataset.labels, dataset.split_tag.copy())


# --------------------------------------------------------------------------
# Classification probe
# --------------------------------------------------------------------------

def _fit_probe(x_train, y_train, l2_strength: float) -> LogisticRegression:
    if np.unique(y_train).size < 2:
        raise SingleClassSplit("training split holds a single class")
    probe = LogisticRegression(C=1.0 / l2_strength, max_iter=5000, tol=1e-10)
    probe.fit(x_train, y_train)
    return probe


def _macro_auprc(probe, x, y) -> float:
    scores = probe.predict_proba(x)
    classes = probe.classes_
    onehot = np.zeros((len(y), len(classes)))
    for j, c in enumerate(classes):
        onehot[:, j] = (y == c).astype(float)
    present = onehot.sum(axis=0) > 0
    return float(average_precision_score(onehot[:, present], scores[:, present],
                                         average="macro"))


def linear_probe_classify(reps: RepresentationSet,
                          l2_strength: float = 1.0) -> TaskReport:
    """L2-penalized multinomial logistic regression on the train split."""
    x_train, y_train = reps.split("train")
    x_test, y_test = reps.split("test")
    if y_train is None or y_test is None:
        raise TsfuseError("classification probe needs class labels")
    if np.unique(y_test).size < 2:
        raise SingleClassSplit("test split holds a single class")
    probe = _fit_probe(x_train, y_train, l2_strength)
    accuracy = float(probe.score(x_test, y_test))
    auprc = _macro_auprc(probe, x_test, y_test)
    return TaskReport("classification",
                      {"accuracy": accuracy, "auprc": auprc},
                      {"l2_strength": l2_strength, "n_train": len(y_train),
                       "n_test": len(y_test)})


# --------------------------------------------------------------------------
# Forecasting head
# --------------------------------------------------------------------------

def ridge_fit(x: np.ndarray, y: np.ndarray, ridge_strength: float,
              fit_intercept: bool = True,
              sample_weight: np.ndarray | None = None):
    """Closed-form ridge: (XᵀWX + λI)⁻¹ XᵀWy, optionally centered."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones(len(x)) if sample_weight is None else np.asarray(sample_weight)
    if fit_intercept:
        x_mean = np.average(x, axis=0, weights=w)
        y_mean = np.average(y, axis=0, weights=w)
        xc, yc = x - x_mean, y - y_mean
    else:
        x_mean = np.zeros(x.shape[1])
        y_mean = np.zeros(y.shape[1]) if y.ndim > 1 else 0.0
        xc, yc = x, y
    gram = xc.T @ (w[:, None] * xc) + ridge_strength * np.eye(x.shape[1])
    coef = np.linalg.solve(gram, xc.T @ (w[:, None] * yc if yc.ndim > 1 else w * yc))
    return coef, x_mean, y_mean


def ridge_predict(x, coef, x_mean, y_mean):
    return (np.asarray(x) - x_mean) @ coef + y_mean


def build_forecast_targets(dataset: TimeSeriesDataset, length: int, stride: int,
                           horizons: list) -> tuple:
    """Window every instance and pair each window with its future values.

    Returns (windowed dataset, targets) where targets[h][i] is the [D] value
    vector h steps after window i ends. Window starts are restricted so the
    largest horizon stays inside the series.
    """
    horizons = sorted(int(h) for h in horizons)
    if not horizons or horizons[0] < 1:
        raise TsfuseError("horizons must be positive integers")
    t = dataset.n_timesteps
    usable = t - max(horizons)
    if usable < length:
        raise HorizonExceedsData(
            f"horizon {max(horizons)} leaves {usable} usable timesteps, "
            f"need window length {length}")
    trimmed = TimeSeriesDataset(dataset.values[:, :, :usable], None,
                                dataset.split_tag.copy(),
                                {**dataset.manifest, "label_kind": "none"})
    windows = make_windows(trimmed, length, stride)
    w = window_count(usable, length, stride)
    targets = {h: np.empty((windows.n_instances, dataset.n_variables))
               for h in horizons}
    for i in range(dataset.n_instances):
        for j in range(w):
            end = j * stride + length - 1
            for h in horizons:
                targets[h][i * w + j] = dataset.values[i, :, end + h]
    return windows, targets


def forecast_eval(reps: RepresentationSet, targets: dict,
                  ridge_strength: float = 1.0) -> TaskReport:
    """Ridge regression per horizon; MSE/MAE on the test split."""
    train_mask = reps.split_tag == "train"
    test_mask = reps.split_tag == "test"
    if not train_mask.any() or not test_mask.any():
        raise TsfuseError("forecasting needs train and test windows")
    metrics = {}
    for h, y in sorted(targets.items()):
        y = np.asarray(y, dtype=np.float64)
        coef, x_mean, y_mean = ridge_fit(reps.reps[train_mask], y[train_mask],
                                         ridge_strength)
        pred = ridge_predict(reps.reps[test_mask], coef, x_mean, y_mean)
        err = pred - y[test_mask]
        metrics[f"mse@{h}"] = float(np.mean(err ** 2))
        metrics[f"mae@{h}"] = float(np.mean(np.abs(err)))
    return TaskReport("forecasting", metrics,
                      {"ridge_strength": ridge_strength,
                       "horizons": sorted(targets)})


# --------------------------------------------------------------------------
# Anomaly detection head
# --------------------------------------------------------------------------

@dataclass
class DecoderConfig:
    """Reconstruction decoder: flat representation -> window of values."""

    window: int = 32
    stride: int = 16
    hidden: int = 32
    epochs: int = 200
    learning_rate: float = 1e-2
    seed: int = 0


class _WindowDecoder(torch.nn.Module):
    def __init__(self, repr_dim: int, d_vars: int, window: int, hidden: int):
        super().__init__()
        kw = {"dtype": torch.float64}
        self.window = window
        self.hidden = hidden
        self.lift = torch.nn.Linear(repr_dim, hidden * window, **kw)
        self.conv = torch.nn.Conv1d(hidden, hidden, 3, padding=1, **kw)
        self.out = torch.nn.Conv1d(hidden, d_vars, 3, padding=1, **kw)

    def forward(self, reps):  # [B, repr_dim] -> [B, D, window]
        h = self.lift(reps).reshape(-1, self.hidden, self.window)
        h = torch.relu(self.conv(h))
        return self.out(h)


def precision_recall_f1(flags: np.ndarray, labels: np.ndarray) -> tuple:
    flags = np.asarray(flags).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = float(np.sum(flags & labels))
    fp = float(np.sum(flags & ~labels))
    fn = float(np.sum(~flags & labels))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 \
        else 0.0
    return precision, recall, f1


def best_f1_threshold(errors: np.ndarray, labels: np.ndarray) -> tuple:
    """Scan thresholds at the observed error values; returns (tau, f1)."""
    flat_err = np.asarray(errors).ravel()
    flat_lab = np.asarray(labels).ravel()
    # the unique values cover every achievable flag set; the extra low
    # candidate covers the flag-everything case
    candidates = np.concatenate(([flat_err.min() - 1.0], np.unique(flat_err)))
    best_tau, best = float(candidates[-1]) + 1.0, -1.0
    for tau in candidates:
        _, _, f1 = precision_recall_f1(flat_err > tau, flat_lab)
        if f1 > best:
            best, best_tau = f1, float(tau)
    # also consider flagging nothing
    if best <= 0.0:
        best_tau = float(flat_err.max()) + 1.0
    return best_tau, best


def reconstruction_errors(values: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Per-timestep mean absolute error across variables: [N, D, T] -> [N, T]."""
    return np.mean(np.abs(np.asarray(values) - np.asarray(recon)), axis=1)


def anomaly_scores(checkpoint: Checkpoint, decoder: _WindowDecoder,
                   dataset: TimeSeriesDataset, config: DecoderConfig) -> np.ndarray:
    """Reconstruct overlapping windows; average per-timestep abs error."""
    windows = make_windows(TimeSeriesDataset(dataset.values, None,
                                             dataset.split_tag.copy(),
                                             {**dataset.manifest,
                                              "label_kind": "none"}),
                           config.window, config.stride)
    reps = extract_feature_maps(checkpoint, windows, "flat")
    with torch.no_grad():
        recon = decoder(torch.as_tensor(reps, dtype=torch.float64)).numpy()
    n, _, t = dataset.values.shape
    w = window_count(t, config.window, config.stride)
    err_sum = np.zeros((n, t))
    err_cnt = np.zeros((n, t))
    for i in range(n):
        for j in range(w):
            start = j * config.stride
            sl = slice(start, start + config.window)
            win_err = np.mean(np.abs(dataset.values[i, :, sl] - recon[i * w + j]),
                              axis=0)
            err_sum[i, sl] += win_err
            err_cnt[i, sl] += 1
    covered = err_cnt > 0
    scores = np.zeros((n, t))
    scores[covered] = err_sum[covered] / err_cnt[covered]
    return scores


def train_decoder(checkpoint: Checkpoint, dataset: TimeSeriesDataset,
                  config: DecoderConfig) -> _WindowDecoder:
    """Fit the reconstruction decoder on the training split only."""
    train_ds = dataset.take(dataset.split_indices("train"))
    windows = make_windows(TimeSeriesDataset(train_ds.values, None,
                                             train_ds.split_tag.copy(),
                                             {**train_ds.manifest,
                                              "label_kind": "none"}),
                           config.window, config.stride)
    reps = extract_feature_maps(checkpoint, windows, "flat")
    x = torch.as_tensor(reps, dtype=torch.float64)
    y = torch.as_tensor(windows.values, dtype=torch.float64)
    torch.manual_seed(config.seed)
    decoder = _WindowDecoder(reps.shape[1], dataset.n_variables,
                             config.window, config.hidden)
    optim = torch.optim.AdamW(decoder.parameters(), lr=config.learning_rate)
    for _ in range(config.epochs):
        optim.zero_grad()
        loss = torch.mean((decoder(x) - y) ** 2)
        loss.backward()
        optim.step()
    return decoder


def anomaly_eval(checkpoint: Checkpoint, decoder_config: DecoderConfig,
                 dataset: TimeSeriesDataset, threshold_policy: str = "best-f1",
                 fixed_threshold: float | None = None) -> TaskReport:
    """Reconstruction-error anomaly detection with a validation-picked τ."""
    if dataset.label_kind != "anomaly":
        raise TsfuseError("anomaly evaluation needs per-timestep flags")
    test_idx = dataset.split_indices("test")
    if dataset.labels[test_idx].sum() == 0:
        raise NoAnomaliesInTest("recall is undefined: test split has no anomalies")

    decoder = train_decoder(checkpoint, dataset, decoder_config)
    scores = anomaly_scores(checkpoint, decoder, dataset, decoder_config)

    notes = []
    if threshold_policy == "best-f1":
        val_idx = dataset.split_indices("val")
        if val_idx.size == 0:
            raise TsfuseError("best-f1 threshold policy needs a validation split")
        tau, _ = best_f1_threshold(scores[val_idx], dataset.labels[val_idx])
    elif threshold_policy == "fixed-value":
        if fixed_threshold is None:
            raise TsfuseError("fixed-value policy needs fixed_threshold")
        tau = float(fixed_threshold)
    else:
        raise TsfuseError(f"unknown threshold_policy {threshold_policy!r}")

    flags = scores[test_idx] > tau
    if not flags.any():
        notes.append("empty-prediction: threshold above every test error")
    precision, recall, f1 = precision_recall_f1(flags, dataset.labels[test_idx])
    return TaskReport("anomaly",
                      {"precision": precision, "recall": recall, "f1": f1,
                       "threshold": tau},
                      {"policy": threshold_policy, "window": decoder_config.window,
                       "stride": decoder_config.stride}, notes)


# --------------------------------------------------------------------------
# Representation diagnostics
# --------------------------------------------------------------------------

def alignment_pairs(checkpoint: Checkpoint, dataset: TimeSeriesDataset,
                    rate: float | None = None, seed: int = 0) -> tuple:
    """Encode two independently augmented views of every instance.

    Row i of each returned array is one view of instance i, so the rows pair
    up positionally. The rate defaults to the checkpoint's training rate.
    """
    if rate is None:
        rate = checkpoint.config.dropout_rate
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(2):
        vals = np.stack([dropout_augment(dataset.values[i], rate, rng)
                         for i in range(dataset.n_instances)])
        view = TimeSeriesDataset(vals, None, dataset.split_tag.copy(),
                                 {**dataset.manifest, "label_kind": "none"})
        views.append(extract_feature_maps(checkpoint, view, "flat"))
    return views[0], views[1]


def alignment_metric(pair_a: np.ndarray, pair_b: np.ndarray) -> dict:
    """Euclidean distances of positive pairs: mean plus fixed-bin histogram.

    Bins cover [0, 2] (the diameter of the unit sphere) at width 0.05.
    """
    a = np.asarray(pair_a, dtype=np.float64)
    b = np.asarray(pair_b, dtype=np.float64)
    if a.shape != b.shape:
        raise TsfuseError("paired representations must share a shape")
    dists = np.linalg.norm(a - b, axis=-1)
    edges = np.arange(0.0, 2.0 + 0.05 / 2, 0.05)
    counts, _ = np.histogram(np.clip(dists, 0.0, 2.0), bins=edges)
    return {"mean": float(dists.mean()), "histogram": counts.tolist(),
            "bin_edges": edges.tolist()}


def uniformity_metric(reps: np.ndarray) -> float:
    """log mean over distinct pairs of exp(-2 ||f_i - f_j||^2); lower = spread."""
    x = np.asarray(reps, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise TooFewSamples("uniformity needs at least 2 representations")
    sq = np.sum(x ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * (x @ x.T)
    iu = np.triu_indices(n, k=1)
    return float(np.log(np.mean(np.exp(-2.0 * np.clip(d2[iu], 0.0, None)))))


@dataclass
class OverlapReport:
    """False-prediction overlap of the temporal-only and spectral-only probes."""

    n_temporal_errors: int
    n_spectral_errors: int
    n_overlap: int
    pct_of_temporal: float | None
    pct_of_spectral: float | None
    undefined: bool

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def overlap_from_error_sets(wrong_temporal: set, wrong_spectral: set) -> OverlapReport:
    overlap = wrong_temporal & wrong_spectral
    n_t, n_s = len(wrong_temporal), len(wrong_spectral)
    return OverlapReport(
        n_temporal_errors=n_t, n_spectral_errors=n_s, n_overlap=len(overlap),
        pct_of_temporal=None if n_t == 0 else 100.0 * len(overlap) / n_t,
        pct_of_spectral=None if n_s == 0 else 100.0 * len(overlap) / n_s,
        undefined=n_t == 0 or n_s == 0)


def false_prediction_overlap(checkpoint: Checkpoint, dataset: TimeSeriesDataset,
                             l2_strength: float = 1.0) -> OverlapReport:
    """Compare the mistakes of probes on the refined temporal/spectral maps.

    One probe sees the flattened S2T output, the other the T2S output; the
    report counts test samples both get wrong.
    """
    if dataset.label_kind != "class":
        raise TsfuseError("overlap analysis needs class labels")
    train_mask = dataset.split_tag == "train"
    test_mask = dataset.split_tag == "test"
    wrong = {}
    for name, which in (("temporal", "F_t"), ("spectral", "F_s")):
        feats = extract_feature_maps(checkpoint, dataset, which)
        probe = _fit_probe(feats[train_mask], dataset.labels[train_mask],
                           l2_strength)
        pred = probe.predict(feats[test_mask])
        wrong[name] = set(np.flatnonzero(pred != dataset.labels[test_mask]))
    return overlap_from_error_sets(wrong["temporal"], wrong["spectral"])
