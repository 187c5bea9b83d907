"""Contrastive objective over joint representations.

Similarity is the inner product of unit-norm feature vectors. The default
objective is InfoNCE over one positive and K negatives per anchor; a literal
variant (log of the raw similarity ratios) ships behind a domain guard for
fidelity experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DomainError, EmptyNegatives, NotNormalized, TsfuseError

LOSS_FORMS = ("infonce", "literal")


@dataclass
class LossConfig:
    temperature: float = 0.05
    form: str = "infonce"

    def __post_init__(self):
        if self.temperature <= 0:
            raise TsfuseError(f"temperature must be positive, got {self.temperature}")
        if self.form not in LOSS_FORMS:
            raise TsfuseError(f"unknown loss form {self.form!r}")

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "form": self.form}

    @classmethod
    def from_dict(cls, payload: dict) -> "LossConfig":
        return cls(**payload)


def _check_unit(x: torch.Tensor, name: str):
    norms = x.norm(dim=-1)
    if (norms - 1).abs().max() > 1e-6:
        raise NotNormalized(f"{name} must be unit-norm, worst norm "
                            f"{norms.flatten()[(norms - 1).abs().argmax()].item():.8f}")


def similarity(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """Inner product of unit vectors; batched over leading dims."""
    _check_unit(f_a, "f_a")
    _check_unit(f_b, "f_b")
    return (f_a * f_b).sum(dim=-1)


def contrastive_loss(anchors: torch.Tensor, positives: torch.Tensor,
                     negatives: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Mean contrastive loss over the batch.

    anchors/positives: [B, dim]; negatives: [B, K, dim] with K >= 1.
    infonce: -log softmax of s_pos/tau against the s_neg/tau logits.
    literal: -log(s_pos/tau) + mean_k log(s_neg_k/tau), requiring every log
    argument to be positive (DomainError otherwise).
    """
    if anchors.dim() == 1:
        anchors = anchors.unsqueeze(0)
        positives = positives.unsqueeze(0)
        negatives = negatives.unsqueeze(0)
    if negatives.dim() != 3 or negatives.shape[1] == 0:
        raise EmptyNegatives("need at least one negative per anchor")

    s_pos = similarity(anchors, positives)  # [B]
    _check_unit(negatives, "negatives")
    s_neg = torch.einsum("bd,bkd->bk", anchors, negatives)  # [B, K]

    tau = config.temperature
    if config.form == "infonce":
        logits = torch.cat([s_pos.unsqueeze(1), s_neg], dim=1) / tau
        per_anchor = -torch.log_softmax(logits, dim=1)[:, 0]
    else:
        if (s_pos <= 0).any() or (s_neg <= 0).any():
            raise DomainError(
                "literal form takes log of similarities; a non-positive "
                "similarity makes the expression undefined")
        per_anchor = -torch.log(s_pos / tau) + torch.log(s_neg / tau).mean(dim=1)
    return per_anchor.mean()
