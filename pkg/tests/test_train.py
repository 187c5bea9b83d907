import numpy as np
import pytest
import torch
import torch.nn.functional as F

from tsfuse import errors
from tsfuse.data import synth_freq_classes
from tsfuse.encoders import EncoderConfig
from tsfuse.fusion import FusionConfig
from tsfuse.loss import LossConfig
from tsfuse.model import TSFuseModel
from tsfuse.train import (
    Checkpoint,
    GradCheckReport,
    TrainConfig,
    apply_checkpoint,
    build_batch,
    finite_difference_check,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    snapshot,
    train,
)


def tiny_encoder(**overrides):
    base = dict(d=8, m=4, n=4, in_channels=1, temporal_blocks=2,
                temporal_kernel=3, spectral_blocks=2, spectral_kernel=3)
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_config(**overrides):
    base = dict(
        learning_rate=1e-3, weight_decay=1e-4, batch_size=8, epochs=1,
        seed=0, dropout_rate=0.1,
        loss=LossConfig(temperature=0.05),
        encoder=tiny_encoder(),
        fusion=FusionConfig(l=4, loops=2),
    )
    base.update(overrides)
    return TrainConfig(**base)


def spectral_dataset(n_per_class=8, seed=0):
    return synth_freq_classes(n_classes=2, n_per_class=n_per_class, D=3, T=64,
                              mode="spectral-only", noise_std=0.1, seed=seed)


# ------------------------------------------------------------------- model

def test_model_forward_shapes_and_unit_norm():
    torch.manual_seed(0)
    model = TSFuseModel(tiny_encoder(), FusionConfig(l=4, loops=2))
    assert model.repr_dim == 32
    x = torch.randn(1, 64, dtype=torch.float64)
    feat = model(x)
    assert feat.flat.shape == (32,)
    assert abs(feat.flat.norm().item() - 1.0) < 1e-9
    batch = torch.randn(5, 1, 64, dtype=torch.float64)
    feat_b = model(batch)
    assert feat_b.flat.shape == (5, 32)
    maps = model.forward_maps(batch)
    assert maps["F_t0"].shape == (5, 4, 8)
    assert maps["F_s0"].shape == (5, 4, 8)
    assert maps["F_bilinear"].shape == (5, 4, 8)


# ------------------------------------------------------------------- train

def test_zero_learning_rate_leaves_parameters_bitwise_unchanged():
    ds = spectral_dataset()
    config = tiny_config(learning_rate=0.0, max_steps=3)
    torch.manual_seed(config.seed)
    reference = TSFuseModel(config.encoder, config.fusion)
    before = {k: v.clone() for k, v in reference.state_dict().items()}
    ckpt = train(config, ds)
    assert len(ckpt.loss_history) == 3
    for name, arr in ckpt.params.items():
        assert np.array_equal(arr, before[name].numpy()), name


def test_training_is_deterministic():
    ds = spectral_dataset()
    config = tiny_config(max_steps=4)
    a = train(config, ds)
    b = train(config, ds)
    assert a.loss_history == b.loss_history
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name]), name


def test_training_reduces_loss_on_spectral_classes():
    ds = spectral_dataset(n_per_class=16, seed=1)
    config = tiny_config(learning_rate=3e-4, epochs=30, max_steps=60, seed=3)
    ckpt = train(config, ds)
    first = float(np.mean(ckpt.loss_history[:15]))
    last = float(np.mean(ckpt.loss_history[-15:]))
    assert last < first, (first, last)


def test_weight_decay_changes_updates():
    ds = spectral_dataset()
    with_wd = train(tiny_config(weight_decay=1e-2, max_steps=1), ds)
    without = train(tiny_config(weight_decay=0.0, max_steps=1), ds)
    different = any(not np.array_equal(with_wd.params[k], without.params[k])
                    for k in with_wd.params)
    assert different


def test_univariate_fallback_uses_batch_negatives():
    ds = synth_freq_classes(n_classes=2, n_per_class=6, D=1, T=64,
                            mode="spectral-only", noise_std=0.1, seed=2)
    config = tiny_config(max_steps=2, batch_size=4)
    ckpt = train(config, ds)
    assert len(ckpt.loss_history) == 2
    assert all(np.isfinite(ckpt.loss_history))


def test_train_requires_training_split():
    ds = spectral_dataset()
    ds.split_tag[:] = "test"
    with pytest.raises(errors.TsfuseError):
        train(tiny_config(), ds)


def test_train_config_validation_and_round_trip():
    with pytest.raises(errors.TsfuseError):
        tiny_config(learning_rate=-1.0)
    with pytest.raises(errors.TsfuseError):
        tiny_config(dropout_rate=1.0)
    with pytest.raises(errors.TsfuseError):
        tiny_config(negative_policy="other-instances", batch_size=1)
    with pytest.raises(errors.TsfuseError):
        tiny_config(negative_policy="hardest")
    config = tiny_config(max_steps=7, n_negatives=3)
    back = TrainConfig.from_dict(config.to_dict())
    assert back.to_dict() == config.to_dict()


def test_build_batch_shapes():
    ds = spectral_dataset()
    config = tiny_config(batch_size=4)
    rng = np.random.default_rng(0)
    a, p, n = build_batch(ds.values, np.array([0, 1, 2, 3]), config,
                          "other-variables", rng)
    assert a.shape == (4, 1, 64)
    assert p.shape == (4, 1, 64)
    assert n.shape == (4, 2, 1, 64)  # K = min(4, D-1) = 2


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bitwise(tmp_path):
    ds = spectral_dataset()
    ckpt = train(tiny_config(max_steps=2), ds)
    path = str(tmp_path / "ckpt-1.bin")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.version == ckpt.version
    assert back.epoch == ckpt.epoch
    assert back.loss_history == ckpt.loss_history
    assert set(back.params) == set(ckpt.params)
    for name in ckpt.params:
        assert np.array_equal(back.params[name], ckpt.params[name]), name
    model = back.build_model()
    for name, tensor in model.state_dict().items():
        assert np.array_equal(tensor.numpy(), ckpt.params[name])


def test_checkpoint_truncated_file_is_corrupt(tmp_path):
    ds = spectral_dataset()
    ckpt = train(tiny_config(max_steps=1), ds)
    path = tmp_path / "ckpt-1.bin"
    save_checkpoint(ckpt, str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 3])
    with pytest.raises(errors.CorruptFile):
        load_checkpoint(str(path))


def test_checkpoint_version_gate(tmp_path):
    ds = spectral_dataset()
    ckpt = train(tiny_config(max_steps=1), ds)
    ckpt.version = 99
    path = str(tmp_path / "ckpt-1.bin")
    save_checkpoint(ckpt, path)
    with pytest.raises(errors.VersionMismatch):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    ds = spectral_dataset()
    ckpt = train(tiny_config(max_steps=1), ds)
    other = TSFuseModel(tiny_encoder(d=16), FusionConfig(l=4, loops=2))
    with pytest.raises(errors.VersionMismatch):
        apply_checkpoint(other, ckpt)


def test_snapshot_is_detached_copy():
    torch.manual_seed(1)
    model = TSFuseModel(tiny_encoder(), FusionConfig(l=4, loops=2))
    ckpt = snapshot(model, tiny_config(), epoch=0, loss_history=[])
    before = {k: v.copy() for k, v in ckpt.params.items()}
    with torch.no_grad():
        for p in model.parameters():
            p.add_(1.0)
    for name in before:
        assert np.array_equal(ckpt.params[name], before[name])


# ---------------------------------------------------------------- gradcheck

def test_finite_difference_checker_calibration():
    # quadratic toy with known closed-form gradient: L = sum((w x)^2)
    x = torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64)
    w = torch.tensor([0.3, 0.7, -1.1], dtype=torch.float64, requires_grad=True)

    def loss_fn():
        return ((w * x) ** 2).sum()

    errs, crossings = finite_difference_check(loss_fn, {"w": w}, epsilon=1e-6,
                                              floor=1e-12)
    assert errs["w"] < 1e-10
    assert crossings == {"w": 0}
    # the analytic gradient itself matches 2 w x^2
    assert torch.allclose(w.grad, 2 * w * x ** 2, atol=1e-12)


def test_finite_difference_checker_discards_relu_crossings():
    # one weight sits exactly on the relu kink: its central difference blends
    # the two one-sided slopes and must be discarded, not reported as error
    x = torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64)
    w = torch.tensor([0.0, -0.7, -1.1], dtype=torch.float64, requires_grad=True)

    def loss_fn():
        return torch.relu(w * x).sum()

    errs, crossings = finite_difference_check(loss_fn, {"w": w}, epsilon=1e-6,
                                              floor=1e-12)
    assert crossings == {"w": 1}
    assert errs["w"] < 1e-9  # the two smooth entries still agree

    # with the guard off the same kink shows up as a large error
    errs, crossings = finite_difference_check(loss_fn, {"w": w}, epsilon=1e-6,
                                              floor=1e-12, kink_guard=False)
    assert crossings == {"w": 0}
    assert errs["w"] > 0.1


def test_finite_difference_checker_discards_pool_ties():
    # an exact tie inside a max-pool window flips its argmax under
    # perturbation; the sample is invalid and the group must not pass
    # vacuously once every perturbation is discarded
    w = torch.tensor([1.0, 1.0], dtype=torch.float64, requires_grad=True)

    def loss_fn():
        return F.adaptive_max_pool1d(w.reshape(1, 1, 2), 1).sum()

    errs, crossings = finite_difference_check(loss_fn, {"w": w}, epsilon=1e-6,
                                              floor=1e-12)
    assert crossings == {"w": 2}
    assert errs["w"] == float("inf")


def test_gradcheck_epsilon_zero_rejected():
    torch.manual_seed(2)
    model = TSFuseModel(tiny_encoder(d=4, m=4, n=4), FusionConfig(l=2, loops=1))
    with pytest.raises(errors.NonFinitePerturbation):
        finite_difference_check(lambda: torch.zeros((), dtype=torch.float64),
                                dict(model.named_parameters()), epsilon=0.0)


def test_gradcheck_full_loss_small_model():
    ds = spectral_dataset()
    config = tiny_config(encoder=tiny_encoder(d=4, m=4, n=4),
                         fusion=FusionConfig(l=2, loops=2), batch_size=2)
    torch.manual_seed(4)
    model = TSFuseModel(config.encoder, config.fusion)
    rng = np.random.default_rng(5)
    sample = build_batch(ds.values, np.array([0, 9]), config,
                         "other-variables", rng)
    report = gradcheck(model, sample, epsilon=1e-6, tolerance=1e-5)
    assert isinstance(report, GradCheckReport)
    assert set(report.group_errors) == {n for n, _ in model.named_parameters()}
    assert report.max_error < 1e-5, report.group_errors
    assert max(report.structure.values()) < 1e-10, report.structure
    assert report.passed
