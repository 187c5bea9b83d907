import numpy as np
import pytest
import torch

from tsfuse import errors
from tsfuse.encoders import (
    EncoderConfig,
    FeatureMaps,
    SpectralEncoder,
    TemporalEncoder,
    to_spectral,
)


# -------------------------------------------------------------- to_spectral

def test_spectral_constant_signal_concentrates_at_dc():
    out = to_spectral(np.array([[1.0, 1.0, 1.0, 1.0]]))
    want = np.array([[np.log(5.0), 0.0, 0.0]])
    assert np.allclose(out, want, atol=1e-12)


def test_spectral_pure_cosine_single_bin():
    t = np.arange(8)
    x = np.cos(2 * np.pi * t / 8)[None, :]
    mag = to_spectral(x, mode="magnitude")
    assert abs(mag[0, 1] - 4.0) < 1e-10
    others = np.delete(mag[0], 1)
    assert np.max(np.abs(others)) < 1e-10


def test_spectral_zero_signal():
    out = to_spectral(np.zeros((2, 16)))
    assert np.array_equal(out, np.zeros((2, 9)))


def test_spectral_too_short_and_bad_mode():
    with pytest.raises(errors.TooShort):
        to_spectral(np.ones((1, 1)))
    with pytest.raises(errors.TsfuseError):
        to_spectral(np.ones((1, 8)), mode="wavelet")


def test_spectral_realimag_channels():
    x = np.random.default_rng(0).standard_normal((2, 16))
    out = to_spectral(x, mode="realimag")
    spec = np.fft.rfft(x, axis=-1)
    assert out.shape == (4, 9)
    assert np.allclose(out[:2], spec.real, atol=1e-12)
    assert np.allclose(out[2:], spec.imag, atol=1e-12)


def test_spectral_tensor_in_tensor_out():
    x = torch.randn(1, 12, dtype=torch.float64)
    out = to_spectral(x)
    assert torch.is_tensor(out)
    assert out.shape == (1, 7)


# ---------------------------------------------------- numpy reference stack

def np_conv1d(x, weight, bias, dilation=1, pad_left=0, pad_both=0):
    """Cross-correlation matching torch Conv1d on a [C, T] signal."""
    c_out, c_in, k = weight.shape
    if pad_left:
        x = np.pad(x, ((0, 0), (pad_left, 0)))
    if pad_both:
        x = np.pad(x, ((0, 0), (pad_both, pad_both)))
    t_out = x.shape[1] - (k - 1) * dilation
    out = np.empty((c_out, t_out))
    for co in range(c_out):
        for t in range(t_out):
            taps = x[:, t:t + (k - 1) * dilation + 1:dilation]
            out[co, t] = bias[co] + np.sum(weight[co] * taps)
    return out


def np_adaptive_max_pool(x, out_len):
    """Torch AdaptiveMaxPool1d bin boundaries: [floor(iT/m), ceil((i+1)T/m))."""
    c, t = x.shape
    out = np.empty((c, out_len))
    for i in range(out_len):
        lo = (i * t) // out_len
        hi = -(-((i + 1) * t) // out_len)
        out[:, i] = x[:, lo:hi].max(axis=1)
    return out


def np_stack_forward(stack, x, pool_to, causal):
    """Reference forward of _ConvStack: proj -> residual blocks -> head -> pool."""
    w = {name: p.detach().numpy() for name, p in stack.named_parameters()}
    h = np_conv1d(x, w["proj.weight"], w["proj.bias"])
    for b, dil in enumerate(stack.dilations):
        k = stack.kernel
        if causal:
            y = np_conv1d(h, w[f"blocks.{b}.weight"], w[f"blocks.{b}.bias"],
                          dilation=dil, pad_left=(k - 1) * dil)
        else:
            y = np_conv1d(h, w[f"blocks.{b}.weight"], w[f"blocks.{b}.bias"],
                          dilation=dil, pad_both=(k - 1) // 2 * dil)
        h = np.maximum(y, 0.0) + h
    h = np_conv1d(h, w["head.weight"], w["head.bias"])
    return np_adaptive_max_pool(h, pool_to).T  # [positions, d]


# ----------------------------------------------------------------- temporal

def small_config(**overrides):
    base = dict(d=5, m=3, n=4, in_channels=2, temporal_blocks=2,
                temporal_kernel=3, spectral_blocks=1, spectral_kernel=3)
    base.update(overrides)
    return EncoderConfig(**base)


def test_temporal_zero_weights_give_zero_features():
    torch.manual_seed(0)
    enc = TemporalEncoder(small_config())
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    out = enc(torch.randn(2, 20, dtype=torch.float64))
    assert torch.equal(out, torch.zeros(3, 5, dtype=torch.float64))


def test_temporal_matches_numpy_reference():
    torch.manual_seed(1)
    cfg = small_config()
    enc = TemporalEncoder(cfg)
    x = np.random.default_rng(2).standard_normal((2, 20))
    got = enc(torch.as_tensor(x)).detach().numpy()
    want = np_stack_forward(enc.stack, x, cfg.m, causal=True)
    assert np.max(np.abs(got - want)) < 1e-10


def test_temporal_causality_pre_pooling():
    torch.manual_seed(3)
    cfg = small_config()
    enc = TemporalEncoder(cfg)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 24))
    base = enc(torch.as_tensor(x), pool=False).detach().numpy()  # [T, d]
    for t in (0, 7, 23):
        bumped = x.copy()
        bumped[1, t] += 1.5
        out = enc(torch.as_tensor(bumped), pool=False).detach().numpy()
        diff = np.abs(out - base).max(axis=1)
        assert np.all(diff[:t] == 0.0), f"leak before t={t}"
        assert diff[t] > 0.0


def test_temporal_shape_independent_of_length():
    torch.manual_seed(5)
    cfg = small_config()
    enc = TemporalEncoder(cfg)
    for t in (128, 256):
        out = enc(torch.randn(2, t, dtype=torch.float64))
        assert out.shape == (3, 5)


def test_temporal_rejects_short_input():
    cfg = small_config()  # receptive field 1 + 2*(1+2) = 7
    assert cfg.temporal_min_t == 7
    enc = TemporalEncoder(cfg)
    with pytest.raises(errors.InputTooShort):
        enc(torch.randn(2, 6, dtype=torch.float64))


def test_temporal_batched_forward_matches_loop():
    torch.manual_seed(6)
    enc = TemporalEncoder(small_config())
    xs = torch.randn(4, 2, 30, dtype=torch.float64)
    batched = enc(xs)
    assert batched.shape == (4, 3, 5)
    for i in range(4):
        assert torch.allclose(batched[i], enc(xs[i]), atol=1e-12)


# ----------------------------------------------------------------- spectral

def test_spectral_zero_weights_give_zero_features():
    torch.manual_seed(7)
    enc = SpectralEncoder(small_config())
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    out = enc(torch.randn(2, 17, dtype=torch.float64))
    assert torch.equal(out, torch.zeros(4, 5, dtype=torch.float64))


def test_spectral_shape_across_spectrum_lengths():
    torch.manual_seed(8)
    enc = SpectralEncoder(small_config())
    for length in (65, 129):
        out = enc(torch.randn(2, length, dtype=torch.float64))
        assert out.shape == (4, 5)


def test_spectral_matches_numpy_reference():
    # proj + one block + head = the 3-layer toy stack, checked end to end
    torch.manual_seed(9)
    cfg = small_config()
    enc = SpectralEncoder(cfg)
    x = np.random.default_rng(10).standard_normal((2, 17))
    got = enc(torch.as_tensor(x)).detach().numpy()
    want = np_stack_forward(enc.stack, x, cfg.n, causal=False)
    assert np.max(np.abs(got - want)) < 1e-10


def test_spectral_one_hot_head_isolates_one_channel():
    torch.manual_seed(10)
    cfg = small_config()
    enc = SpectralEncoder(cfg)
    channel = 3
    with torch.no_grad():
        enc.stack.head.weight.zero_()
        enc.stack.head.bias.zero_()
        for c in range(cfg.d):
            enc.stack.head.weight[c, channel, 0] = 1.0
    x = torch.randn(2, 17, dtype=torch.float64)
    out = enc(x)
    # every output column is the pooled activation of backbone channel 3
    h = enc.stack.proj(x.unsqueeze(0))
    conv = enc.stack.blocks[0]
    h = torch.relu(conv(h)) + h
    pooled = torch.nn.functional.adaptive_max_pool1d(h, cfg.n)[0, channel]
    for c in range(cfg.d):
        assert torch.allclose(out[:, c], pooled, atol=1e-12)


def test_spectral_rejects_short_spectrum():
    cfg = small_config()
    enc = SpectralEncoder(cfg)
    with pytest.raises(errors.InputTooShort):
        enc(torch.randn(2, 2, dtype=torch.float64))


# -------------------------------------------------------------- invariants

def test_config_validation():
    with pytest.raises(errors.TsfuseError):
        EncoderConfig(d=1)
    with pytest.raises(errors.TsfuseError):
        EncoderConfig(dilations=(1, 2, 2, 4))
    with pytest.raises(errors.TsfuseError):
        EncoderConfig(dilations=(1, 3, 4, 8))
    with pytest.raises(errors.TsfuseError):
        EncoderConfig(spectral_kernel=4)
    cfg = EncoderConfig()
    assert cfg.dilations == (1, 2, 4, 8)
    assert cfg.temporal_min_t == 31


def test_config_round_trip():
    cfg = EncoderConfig(d=8, m=2, n=3, temporal_blocks=3, spectral_mode="magnitude")
    back = EncoderConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_feature_maps_reject_nonfinite():
    good = torch.zeros(3, 5, dtype=torch.float64)
    bad = good.clone()
    bad[0, 0] = float("nan")
    FeatureMaps(good, good)
    with pytest.raises(errors.TsfuseError):
        FeatureMaps(bad, good)


def test_encoders_deterministic_forward():
    torch.manual_seed(11)
    cfg = small_config()
    t_enc, s_enc = TemporalEncoder(cfg), SpectralEncoder(cfg)
    x = torch.randn(2, 40, dtype=torch.float64)
    spec = to_spectral(x)
    assert torch.equal(t_enc(x), t_enc(x))
    assert torch.equal(s_enc(spec), s_enc(spec))
