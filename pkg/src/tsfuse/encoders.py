"""Temporal and spectral encoders.

The temporal encoder is a stack of dilated causal conv blocks; the spectral
encoder applies plain conv blocks to the FFT magnitude spectrum. Both end in
adaptive max-pooling so the feature maps have fixed sizes [m x d] and [n x d]
no matter the input length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputTooShort, TooShort, TsfuseError

SPECTRAL_MODES = ("log1p", "magnitude", "realimag")


def _default_dilations(blocks: int) -> tuple:
    return tuple(2 ** i for i in range(blocks))


@dataclass
class EncoderConfig:
    """Architecture sizes shared by both encoders.

    d: channel width; m/n: pooled positions of the temporal/spectral maps;
    in_channels: variables entering the first conv layer.
    """

    d: int = 64
    m: int = 16
    n: int = 16
    in_channels: int = 1
    temporal_blocks: int = 4
    temporal_kernel: int = 3
    dilations: tuple | None = None
    spectral_blocks: int = 3
    spectral_kernel: int = 3
    spectral_mode: str = "log1p"

    def __post_init__(self):
        if self.d < 2 or self.m < 1 or self.n < 1:
            raise TsfuseError("need d >= 2, m >= 1, n >= 1")
        if self.in_channels < 1:
            raise TsfuseError("in_channels must be >= 1")
        if self.temporal_blocks < 1 or self.spectral_blocks < 1:
            raise TsfuseError("block counts must be >= 1")
        if self.temporal_kernel < 1:
            raise TsfuseError("temporal kernel must be >= 1")
        if self.spectral_kernel < 1 or self.spectral_kernel % 2 == 0:
            raise TsfuseError("spectral kernel must be odd (same-length padding)")
        if self.dilations is None:
            self.dilations = _default_dilations(self.temporal_blocks)
        self.dilations = tuple(int(x) for x in self.dilations)
        if len(self.dilations) != self.temporal_blocks:
            raise TsfuseError("need one dilation per temporal block")
        for prev, cur in zip(self.dilations, self.dilations[1:]):
            if cur <= prev:
                raise TsfuseError("dilation schedule must be strictly increasing")
        for dil in self.dilations:
            if dil < 1 or dil & (dil - 1):
                raise TsfuseError(f"dilations must be powers of two, got {dil}")
        if self.spectral_mode not in SPECTRAL_MODES:
            raise TsfuseError(f"unknown spectral_mode {self.spectral_mode!r}")

    @property
    def temporal_min_t(self) -> int:
        """Receptive field of the causal stack; shorter inputs are rejected."""
        return 1 + (self.temporal_kernel - 1) * sum(self.dilations)

    @property
    def spectral_min_t(self) -> int:
        return 1 + (self.spectral_kernel - 1) * self.spectral_blocks

    @property
    def spectral_in_channels(self) -> int:
        # real/imag mode stacks both parts as extra channels
        return 2 * self.in_channels if self.spectral_mode == "realimag" else self.in_channels

    def to_dict(self) -> dict:
        return {
            "d": self.d, "m": self.m, "n": self.n, "in_channels": self.in_channels,
            "temporal_blocks": self.temporal_blocks, "temporal_kernel": self.temporal_kernel,
            "dilations": list(self.dilations), "spectral_blocks": self.spectral_blocks,
            "spectral_kernel": self.spectral_kernel, "spectral_mode": self.spectral_mode,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EncoderConfig":
        payload = dict(payload)
        if payload.get("dilations") is not None:
            payload["dilations"] = tuple(payload["dilations"])
        return cls(**payload)


@dataclass
class FeatureMaps:
    """The pair of encoder outputs for one input."""

    F_t: torch.Tensor  # [m, d] or [B, m, d]
    F_s: torch.Tensor  # [n, d] or [B, n, d]

    def __post_init__(self):
        if not torch.isfinite(self.F_t).all() or not torch.isfinite(self.F_s).all():
            raise TsfuseError("feature maps must be finite")


def to_spectral(x_t, mode: str = "log1p"):
    """FFT the time axis; returns [D_sel x (floor(T/2)+1)] per the mode.

    log1p: log(1 + |rFFT|); magnitude: |rFFT|; realimag: real and imaginary
    parts stacked along the channel axis (doubling D_sel).
    """
    if mode not in SPECTRAL_MODES:
        raise TsfuseError(f"unknown spectral mode {mode!r}")
    is_numpy = not torch.is_tensor(x_t)
    x = torch.as_tensor(np.asarray(x_t) if is_numpy else x_t, dtype=torch.float64)
    if x.shape[-1] < 2:
        raise TooShort(f"need T >= 2 for an FFT, got T={x.shape[-1]}")
    spec = torch.fft.rfft(x, dim=-1)
    if mode == "realimag":
        out = torch.cat([spec.real, spec.imag], dim=-2)
    else:
        mag = spec.abs()
        out = torch.log1p(mag) if mode == "log1p" else mag
    return out.numpy() if is_numpy else out


class _ConvStack(nn.Module):
    """proj (1x1) -> residual conv blocks -> head (1x1) -> adaptive max pool."""

    def __init__(self, in_channels, d, kernel, dilations, pool_to, causal):
        super().__init__()
        self.causal = causal
        self.kernel = kernel
        self.dilations = dilations
        self.pool_to = pool_to
        kw = {"dtype": torch.float64}
        self.proj = nn.Conv1d(in_channels, d, 1, **kw)
        self.blocks = nn.ModuleList(
            nn.Conv1d(d, d, kernel,
                      padding=0 if causal else (kernel - 1) // 2 * dil,
                      dilation=dil, **kw)
            for dil in dilations)
        self.head = nn.Conv1d(d, d, 1, **kw)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-pooling feature sequence [B, d, T]."""
        h = self.proj(x)
        for conv, dil in zip(self.blocks, self.dilations):
            inp = F.pad(h, ((self.kernel - 1) * dil, 0)) if self.causal else h
            h = torch.relu(conv(inp)) + h
        return self.head(h)

    def forward(self, x: torch.Tensor, pool: bool = True) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3:
            raise TsfuseError(f"input must be [D, T] or [B, D, T], got {tuple(x.shape)}")
        h = self.features(x.to(torch.float64))
        if pool:
            h = F.adaptive_max_pool1d(h, self.pool_to)
        out = h.transpose(1, 2)  # [B, positions, d]
        return out.squeeze(0) if squeeze else out


class TemporalEncoder(nn.Module):
    """Dilated causal conv stack pooled to exactly m positions."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stack = _ConvStack(config.in_channels, config.d, config.temporal_kernel,
                                config.dilations, config.m, causal=True)

    def forward(self, x: torch.Tensor, pool: bool = True) -> torch.Tensor:
        if x.shape[-1] < self.config.temporal_min_t:
            raise InputTooShort(
                f"temporal encoder needs T >= {self.config.temporal_min_t}, "
                f"got T={x.shape[-1]}")
        return self.stack(x, pool=pool)


class SpectralEncoder(nn.Module):
    """Plain conv stack over the spectrum, pooled to exactly n positions."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stack = _ConvStack(config.spectral_in_channels, config.d,
                                config.spectral_kernel,
                                tuple([1] * config.spectral_blocks),
                                config.n, causal=False)

    def forward(self, x_s: torch.Tensor, pool: bool = True) -> torch.Tensor:
        if x_s.shape[-1] < self.config.spectral_min_t:
            raise InputTooShort(
                f"spectral encoder needs spectrum length >= {self.config.spectral_min_t}, "
                f"got {x_s.shape[-1]}")
        return self.stack(x_s, pool=pool)


def temporal_encode(x_t, encoder: TemporalEncoder) -> torch.Tensor:
    """F_t [m x d] for one series [D_sel x T]."""
    return encoder(torch.as_tensor(np.asarray(x_t), dtype=torch.float64))


def spectral_encode(x_s, encoder: SpectralEncoder) -> torch.Tensor:
    """F_s [n x d] for one spectral signal [D_sel x (floor(T/2)+1)]."""
    return encoder(torch.as_tensor(np.asarray(x_s), dtype=torch.float64))
