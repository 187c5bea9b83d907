import numpy as np
import pytest

from tsfuse.data import synth_anomaly_series, synth_freq_classes, zscore_normalize
from tsfuse.encoders import EncoderConfig
from tsfuse.errors import (
    HorizonExceedsData,
    NoAnomaliesInTest,
    SingleClassSplit,
    TooFewSamples,
    TsfuseError,
)
from tsfuse.evaluate import (
    DecoderConfig,
    RepresentationSet,
    TaskReport,
    alignment_metric,
    anomaly_eval,
    anomaly_scores,
    best_f1_threshold,
    build_forecast_targets,
    extract_feature_maps,
    extract_representations,
    false_prediction_overlap,
    forecast_eval,
    linear_probe_classify,
    overlap_from_error_sets,
    precision_recall_f1,
    reconstruction_errors,
    ridge_fit,
    ridge_predict,
    train_decoder,
    uniformity_metric,
)
from tsfuse.fusion import FusionConfig
from tsfuse.train import TrainConfig, train


def small_train_config(**overrides):
    encoder = EncoderConfig(d=8, m=4, n=4, temporal_blocks=2, dilations=(1, 2),
                            spectral_blocks=2)
    fusion = FusionConfig(l=4, loops=2)
    base = dict(learning_rate=1e-3, batch_size=8, max_steps=40, seed=11,
                encoder=encoder, fusion=fusion)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def spectral_setup():
    ds = synth_freq_classes(n_classes=2, n_per_class=10, D=1, T=64,
                            mode="spectral-only", noise_std=0.05, seed=4)
    ds, _ = zscore_normalize(ds)
    ckpt = train(small_train_config(), ds)
    return ckpt, ds


@pytest.fixture(scope="module")
def anomaly_setup():
    ds = synth_anomaly_series(D=1, T=256, n_instances=12, spike_rate=0.02,
                              spike_magnitude=10.0, seed=7)
    ds, _ = zscore_normalize(ds)
    ckpt = train(small_train_config(batch_size=6, max_steps=30, seed=2), ds)
    return ckpt, ds, DecoderConfig(window=32, stride=16, hidden=16,
                                   epochs=150, seed=0)


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Representation extraction
# --------------------------------------------------------------------------

def test_extraction_deterministic_and_unit_norm(spectral_setup):
    ckpt, ds = spectral_setup
    a = extract_representations(ckpt, ds)
    b = extract_representations(ckpt, ds)
    assert np.array_equal(a.reps, b.reps)
    assert np.max(np.abs(np.linalg.norm(a.reps, axis=1) - 1.0)) < 1e-9
    assert a.reps.shape == (ds.n_instances, 4 * 8)


def test_trained_classes_cluster(spectral_setup):
    # frequency-coded classes: same-class representations should sit closer
    # together than cross-class ones
    ckpt, ds = spectral_setup
    reps = extract_representations(ckpt, ds).reps
    same = ds.labels[:, None] == ds.labels[None, :]
    cos = reps @ reps.T
    iu = np.triu_indices(len(reps), k=1)
    within = cos[iu][same[iu]].mean()
    between = cos[iu][~same[iu]].mean()
    assert between < within


def test_multivariate_extraction_averages_variables(spectral_setup):
    ckpt, _ = spectral_setup
    rng = np.random.default_rng(0)
    values = rng.standard_normal((4, 3, 64))
    from tsfuse.data import TimeSeriesDataset
    ds = TimeSeriesDataset(values, None, np.array(["train"] * 4),
                           {"label_kind": "none"})
    got = extract_feature_maps(ckpt, ds, "flat")
    per_var = []
    for v in range(3):
        one = TimeSeriesDataset(values[:, v:v + 1], None,
                                np.array(["train"] * 4), {"label_kind": "none"})
        per_var.append(extract_feature_maps(ckpt, one, "flat"))
    expected = unit_rows(np.mean(per_var, axis=0))
    assert np.max(np.abs(got - expected)) < 1e-12


def test_representation_set_validation():
    with pytest.raises(TsfuseError):
        RepresentationSet(np.ones((3, 4)), None, np.array(["train"] * 3))
    with pytest.raises(TsfuseError):
        RepresentationSet(np.ones(4), None, np.array(["train"]))


# --------------------------------------------------------------------------
# Classification probe
# --------------------------------------------------------------------------

def toy_reps(n_per_class=20, dim=6, sep=4.0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2 * n_per_class, dim)) * 0.1
    x[:n_per_class, 0] += sep
    x[n_per_class:, 1] += sep
    labels = np.repeat([0, 1], n_per_class)
    tags = np.tile(["train", "test"], n_per_class)
    return RepresentationSet(unit_rows(x), labels, tags)


def test_probe_separable_is_perfect():
    report = linear_probe_classify(toy_reps(), l2_strength=1.0)
    assert report.kind == "classification"
    assert report.metrics["accuracy"] == 1.0
    assert report.metrics["auprc"] == pytest.approx(1.0, abs=1e-12)


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    n = 2000
    x = unit_rows(rng.standard_normal((n, 4)))
    labels = np.repeat([0, 1], n // 2)
    rng.shuffle(labels)
    tags = np.tile(["train", "test"], n // 2)
    report = linear_probe_classify(RepresentationSet(x, labels, tags))
    assert 0.44 <= report.metrics["accuracy"] <= 0.56


def test_probe_single_class_split():
    reps = toy_reps()
    reps.labels[reps.split_tag == "test"] = 0
    with pytest.raises(SingleClassSplit):
        linear_probe_classify(reps)
    reps = toy_reps()
    reps.labels[reps.split_tag == "train"] = 1
    with pytest.raises(SingleClassSplit):
        linear_probe_classify(reps)


def test_f1_consistent_with_counts():
    rng = np.random.default_rng(3)
    flags = rng.random(200) > 0.7
    labels = rng.random(200) > 0.8
    p, r, f1 = precision_recall_f1(flags, labels)
    tp = np.sum(flags & labels)
    assert p == pytest.approx(tp / flags.sum())
    assert r == pytest.approx(tp / labels.sum())
    assert f1 == pytest.approx(2 * p * r / (p + r))


# --------------------------------------------------------------------------
# Forecasting
# --------------------------------------------------------------------------

def test_ridge_hand_case():
    # (X^T X + 1)^-1 X^T y with X=[1,2,3]^T, y=[1,2,3]: 14/15
    coef, _, _ = ridge_fit(np.array([[1.0], [2.0], [3.0]]),
                           np.array([1.0, 2.0, 3.0]),
                           ridge_strength=1.0, fit_intercept=False)
    assert coef[0] == pytest.approx(14.0 / 15.0, abs=1e-12)


def test_ridge_recovers_coordinate():
    rng = np.random.default_rng(5)
    x = unit_rows(rng.standard_normal((60, 6)))
    tags = np.tile(["train", "test"], 30)
    targets = {1: x[:, 2:3].copy()}
    reps = RepresentationSet(x, None, tags)
    report = forecast_eval(reps, targets, ridge_strength=1e-10)
    assert report.metrics["mse@1"] < 1e-10


def test_ridge_constant_target():
    rng = np.random.default_rng(6)
    x = unit_rows(rng.standard_normal((40, 5)))
    tags = np.tile(["train", "test"], 20)
    targets = {2: np.full((40, 1), 3.7)}
    report = forecast_eval(RepresentationSet(x, None, tags), targets,
                           ridge_strength=0.5)
    assert report.metrics["mae@2"] < 1e-8


def test_ridge_duplicate_equals_weight():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((10, 3))
    y = rng.standard_normal(10)
    x_dup = np.vstack([x, x[:1]])
    y_dup = np.concatenate([y, y[:1]])
    w = np.ones(10)
    w[0] = 2.0
    probe = rng.standard_normal((4, 3))
    coef_a, xm_a, ym_a = ridge_fit(x_dup, y_dup, 0.3)
    coef_b, xm_b, ym_b = ridge_fit(x, y, 0.3, sample_weight=w)
    pred_a = ridge_predict(probe, coef_a, xm_a, ym_a)
    pred_b = ridge_predict(probe, coef_b, xm_b, ym_b)
    assert np.max(np.abs(pred_a - pred_b)) < 1e-12


def test_forecast_target_alignment():
    from tsfuse.data import TimeSeriesDataset
    t = np.arange(20, dtype=np.float64)
    values = np.stack([np.stack([t, -t]), np.stack([t + 100, -(t + 100)])])
    ds = TimeSeriesDataset(values, None, np.array(["train", "test"]),
                           {"label_kind": "none"})
    windows, targets = build_forecast_targets(ds, length=8, stride=4,
                                              horizons=[1, 3])
    # usable length 20-3=17 -> window starts 0, 4, 8
    assert windows.n_instances == 6
    # first instance, window starting at 4 ends at index 11
    assert targets[1][1].tolist() == [12.0, -12.0]
    assert targets[3][1].tolist() == [14.0, -14.0]
    assert targets[3][4].tolist() == [114.0, -114.0]
    with pytest.raises(HorizonExceedsData):
        build_forecast_targets(ds, length=8, stride=4, horizons=[13])


def test_forecast_with_extracted_representations(spectral_setup):
    ckpt, ds = spectral_setup
    windows, targets = build_forecast_targets(ds, length=16, stride=8,
                                              horizons=[1, 5])
    reps = extract_representations(ckpt, windows)
    report = forecast_eval(reps, targets, ridge_strength=1.0)
    for key in ("mse@1", "mae@1", "mse@5", "mae@5"):
        assert report.metrics[key] >= 0.0
    assert report.config["horizons"] == [1, 5]


# --------------------------------------------------------------------------
# Anomaly detection
# --------------------------------------------------------------------------

def test_oracle_reconstruction_perfect_f1():
    spec = dict(D=2, T=200, n_instances=8, spike_rate=0.02, seed=9)
    clean = synth_anomaly_series(spike_magnitude=0.0, **spec)
    spiky = synth_anomaly_series(spike_magnitude=10.0, **spec)
    errors = reconstruction_errors(spiky.values, clean.values)
    val = spiky.split_indices("val")
    test = spiky.split_indices("test")
    tau, _ = best_f1_threshold(errors[val], spiky.labels[val])
    p, r, f1 = precision_recall_f1(errors[test] > tau, spiky.labels[test])
    assert (p, r, f1) == (1.0, 1.0, 1.0)


def test_best_f1_beats_every_other_threshold():
    rng = np.random.default_rng(10)
    errors = rng.random(120)
    labels = rng.random(120) > 0.8
    tau, best = best_f1_threshold(errors, labels)
    _, _, f1_at_tau = precision_recall_f1(errors > tau, labels)
    assert f1_at_tau == pytest.approx(best)
    for probe_tau in np.linspace(errors.min() - 0.1, errors.max() + 0.1, 201):
        _, _, f1 = precision_recall_f1(errors > probe_tau, labels)
        assert best >= f1 - 1e-12


def test_anomaly_eval_beats_random_baseline(anomaly_setup):
    ckpt, ds, decoder_config = anomaly_setup
    report = anomaly_eval(ckpt, decoder_config, ds, "best-f1")
    test_idx = ds.split_indices("test")
    n_points = ds.labels[test_idx].size
    anomaly_rate = ds.labels[test_idx].sum() / n_points
    # a random scorer flagging the same fraction q has expected
    # precision = anomaly rate and recall = q
    scores = anomaly_scores(ckpt, train_decoder(ckpt, ds, decoder_config),
                            ds, decoder_config)
    q = np.mean(scores[test_idx] > report.metrics["threshold"])
    baseline = (2 * anomaly_rate * q / (anomaly_rate + q)
                if anomaly_rate + q > 0 else 0.0)
    assert report.metrics["f1"] > baseline
    assert report.kind == "anomaly"


def test_threshold_above_max_flags_nothing(anomaly_setup):
    ckpt, ds, decoder_config = anomaly_setup
    report = anomaly_eval(ckpt, decoder_config, ds, "fixed-value",
                          fixed_threshold=1e9)
    assert report.metrics["recall"] == 0.0
    assert report.metrics["precision"] == 0.0
    assert any("empty-prediction" in note for note in report.notes)


def test_no_anomalies_in_test_rejected(anomaly_setup):
    ckpt, _, decoder_config = anomaly_setup
    quiet = synth_anomaly_series(D=1, T=100, n_instances=8, spike_rate=0.001,
                                 spike_magnitude=10.0, seed=3)
    assert quiet.labels.sum() == 0  # round(0.001 * 100) spikes per instance
    with pytest.raises(NoAnomaliesInTest):
        anomaly_eval(ckpt, decoder_config, quiet, "best-f1")


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------

def test_alignment_identical_and_antipodal():
    rng = np.random.default_rng(11)
    a = unit_rows(rng.standard_normal((50, 8)))
    out = alignment_metric(a, a)
    assert out["mean"] == 0.0
    assert out["histogram"][0] == 50
    out = alignment_metric(a, -a)
    assert out["mean"] == 2.0
    assert out["histogram"][-1] == 50
    assert len(out["histogram"]) == 40


def test_alignment_random_pairs_concentrate():
    rng = np.random.default_rng(12)
    a = unit_rows(rng.standard_normal((1000, 512)))
    b = unit_rows(rng.standard_normal((1000, 512)))
    mean = alignment_metric(a, b)["mean"]
    assert abs(mean - np.sqrt(2)) / np.sqrt(2) < 0.05


def test_uniformity_closed_forms():
    assert uniformity_metric(np.tile([1.0, 0.0], (5, 1))) == 0.0
    assert uniformity_metric(np.array([[1.0, 0.0], [-1.0, 0.0]])) == \
        pytest.approx(-8.0, abs=1e-12)
    assert uniformity_metric(np.eye(6)) == pytest.approx(-4.0, abs=1e-12)
    with pytest.raises(TooFewSamples):
        uniformity_metric(np.ones((1, 4)))


def test_uniformity_never_positive():
    rng = np.random.default_rng(13)
    for _ in range(5):
        reps = unit_rows(rng.standard_normal((20, 6)))
        assert uniformity_metric(reps) <= 0.0


def test_overlap_report_arithmetic():
    report = overlap_from_error_sets(set(), set())
    assert report.undefined and report.n_overlap == 0
    assert report.pct_of_temporal is None and report.pct_of_spectral is None
    report = overlap_from_error_sets({1, 2, 3}, {1, 2, 3})
    assert not report.undefined
    assert report.pct_of_temporal == 100.0 and report.pct_of_spectral == 100.0
    report = overlap_from_error_sets({1, 2, 3, 4}, {3, 4, 5})
    assert report.n_overlap == 2
    assert report.pct_of_temporal == 50.0
    assert report.pct_of_spectral == pytest.approx(200.0 / 3.0)


def test_overlap_end_to_end(spectral_setup):
    ckpt, ds = spectral_setup
    report = false_prediction_overlap(ckpt, ds)
    assert report.n_overlap <= min(report.n_temporal_errors,
                                   report.n_spectral_errors)
    assert report.undefined == (report.n_temporal_errors == 0
                                or report.n_spectral_errors == 0)
    d = report.to_dict()
    assert set(d) == {"n_temporal_errors", "n_spectral_errors", "n_overlap",
                      "pct_of_temporal", "pct_of_spectral", "undefined"}


def test_task_report_rejects_out_of_range():
    with pytest.raises(TsfuseError):
        TaskReport("classification", {"accuracy": 1.2})
    with pytest.raises(TsfuseError):
        TaskReport("forecasting", {"mse@1": -0.5})
    report = TaskReport("classification", {"accuracy": 0.9, "auprc": 1.0})
    assert report.to_dict()["metrics"]["accuracy"] == 0.9
