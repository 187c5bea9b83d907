"""End-to-end assembly: series -> encoders -> fusion loop -> joint feature."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .encoders import EncoderConfig, SpectralEncoder, TemporalEncoder, to_spectral
from .fusion import (
    BilinearFeature,
    FusionConfig,
    FusionParams,
    iterate_fusion,
    joint_feature,
)


class TSFuseModel(nn.Module):
    """Both encoder branches plus the fusion block, as one parameter tree.

    forward() maps a series [D_sel, T] (or a batch [B, D_sel, T]) to its
    joint BilinearFeature; forward_maps() also exposes the intermediate
    feature maps for diagnostics.
    """

    def __init__(self, encoder_config: EncoderConfig, fusion_config: FusionConfig):
        super().__init__()
        self.encoder_config = encoder_config
        self.fusion_config = fusion_config
        self.temporal = TemporalEncoder(encoder_config)
        self.spectral = SpectralEncoder(encoder_config)
        self.fusion = FusionParams(encoder_config.m, encoder_config.n,
                                   encoder_config.d, fusion_config)

    @property
    def repr_dim(self) -> int:
        return self.fusion_config.l * self.encoder_config.d

    def forward_maps(self, x) -> dict:
        if not torch.is_tensor(x):
            x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
        x = x.to(torch.float64)
        x_s = to_spectral(x, self.encoder_config.spectral_mode)
        f_t0 = self.temporal(x)
        f_s0 = self.spectral(x_s)
        f_t, f_s, f_bilinear = iterate_fusion(f_t0, f_s0, self.fusion)
        feature = joint_feature(f_t0, f_s0, f_t, f_s, self.fusion)
        return {"F_t0": f_t0, "F_s0": f_s0, "F_t": f_t, "F_s": f_s,
                "F_bilinear": f_bilinear, "feature": feature}

    def forward(self, x) -> BilinearFeature:
        return self.forward_maps(x)["feature"]
