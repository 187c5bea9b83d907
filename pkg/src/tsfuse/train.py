"""Training loop, checkpointing, and gradient verification.

Training is deterministic given (config, seed, dataset): the numeric path is
single-threaded, every random draw comes from explicitly seeded generators,
and batches/tuples are resampled from a per-step stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.utils._python_dispatch import TorchDispatchMode

from .augment import AugmentPolicy, make_policy_tuple, make_tuple
from .data import TimeSeriesDataset
from .encoders import EncoderConfig
from .errors import (
    CorruptFile,
    NonFiniteLoss,
    NonFinitePerturbation,
    TsfuseError,
    VersionMismatch,
)
from .fusion import FusionConfig, bilinear_pool_lowrank, joint_feature
from .loss import LossConfig, contrastive_loss
from .model import TSFuseModel

CHECKPOINT_VERSION = 1

NEGATIVE_POLICIES = ("auto", "other-variables", "other-instances")


@dataclass
class TrainConfig:
    """Everything the optimization loop needs, JSON-serializable.

    Full-scale training wants lr 3e-4, weight decay 1e-4, batch 256; the
    batch default here is 32 to suit small datasets.
    """

    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    dropout_rate: float = 0.1
    n_negatives: int | None = None  # None: min(4, available)
    negative_policy: str = "auto"
    augment: AugmentPolicy | None = None  # None: the default two-dropout views
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        # learning_rate 0 is allowed: it is the documented null-update case
        if self.learning_rate < 0:
            raise TsfuseError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise TsfuseError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise TsfuseError("batch_size must be >= 1")
        # epochs 0 is allowed: the checkpoint is then the initialization
        if self.epochs < 0:
            raise TsfuseError("epochs must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise TsfuseError("max_steps must be >= 1 when set")
        if not 0 <= self.dropout_rate < 1:
            raise TsfuseError("dropout_rate must lie in [0, 1)")
        if self.n_negatives is not None and self.n_negatives < 1:
            raise TsfuseError("n_negatives must be >= 1 when set")
        if self.negative_policy not in NEGATIVE_POLICIES:
            raise TsfuseError(f"unknown negative_policy {self.negative_policy!r}")
        if self.negative_policy == "other-instances" and self.batch_size < 2:
            raise TsfuseError("other-instances negatives need batch_size >= 2")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "max_steps": self.max_steps, "seed": self.seed,
            "dropout_rate": self.dropout_rate, "n_negatives": self.n_negatives,
            "negative_policy": self.negative_policy,
            "augment": None if self.augment is None else self.augment.to_dict(),
            "loss": self.loss.to_dict(),
            "encoder": self.encoder.to_dict(), "fusion": self.fusion.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        payload["loss"] = LossConfig.from_dict(payload.get("loss", {}))
        payload["encoder"] = EncoderConfig.from_dict(payload.get("encoder", {}))
        payload["fusion"] = FusionConfig.from_dict(payload.get("fusion", {}))
        raw_augment = payload.get("augment")
        if raw_augment is not None and not isinstance(raw_augment, AugmentPolicy):
            payload["augment"] = AugmentPolicy.from_dict(raw_augment)
        return cls(**payload)


@dataclass
class Checkpoint:
    """Named parameter arrays plus the config snapshot that produced them."""

    params: dict  # name -> np.ndarray
    config: TrainConfig
    epoch: int
    loss_history: list
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> TSFuseModel:
        model = TSFuseModel(self.config.encoder, self.config.fusion)
        apply_checkpoint(model, self)
        return model


def apply_checkpoint(model: TSFuseModel, ckpt: Checkpoint) -> None:
    """Load checkpoint arrays into a model; configs must match exactly."""
    if model.encoder_config.to_dict() != ckpt.config.encoder.to_dict() \
            or model.fusion_config.to_dict() != ckpt.config.fusion.to_dict():
        raise VersionMismatch("checkpoint was produced under a different "
                              "encoder/fusion configuration")
    state = {k: torch.as_tensor(v) for k, v in ckpt.params.items()}
    model.load_state_dict(state)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    payload = {
        "version": np.array(ckpt.version),
        "epoch": np.array(ckpt.epoch),
        "loss_history": np.asarray(ckpt.loss_history, dtype=np.float64),
        "config_json": np.array(json.dumps(ckpt.config.to_dict())),
    }
    for name, arr in ckpt.params.items():
        payload[f"param::{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            version = int(z["version"])
            if version != CHECKPOINT_VERSION:
                raise VersionMismatch(
                    f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
            config = TrainConfig.from_dict(json.loads(str(z["config_json"])))
            params = {k[len("param::"):]: z[k] for k in z.files
                      if k.startswith("param::")}
            return Checkpoint(params=params, config=config, epoch=int(z["epoch"]),
                              loss_history=[float(x) for x in z["loss_history"]])
    except VersionMismatch:
        raise
    except Exception as err:
        raise CorruptFile(f"cannot read checkpoint {path}: {err}") from err


def snapshot(model: TSFuseModel, config: TrainConfig, epoch: int,
             loss_history: list) -> Checkpoint:
    params = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint(params=params, config=config, epoch=epoch,
                      loss_history=list(loss_history))


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def _resolve_policy(config: TrainConfig, d: int) -> str:
    if config.negative_policy != "auto":
        return config.negative_policy
    return "other-variables" if d >= 2 else "other-instances"


def build_batch(values: np.ndarray, indices: np.ndarray, config: TrainConfig,
                policy: str, rng: np.random.Generator):
    """Contrastive tensors for one step: anchors/positives [B,1,T], negatives [B,K,1,T]."""
    d = values.shape[1]
    batch_values = values[indices]
    if policy == "other-variables":
        k = config.n_negatives if config.n_negatives is not None else min(4, d - 1)
    else:
        k = config.n_negatives if config.n_negatives is not None \
            else min(4, len(indices) - 1)
    anchors, positives, negatives = [], [], []
    for row, _ in enumerate(indices):
        var = int(rng.integers(0, d))
        seed = int(rng.integers(0, 2 ** 63 - 1))
        kwargs = {"seed": seed}
        if policy == "other-instances":
            kwargs.update(batch=batch_values, instance_id=row)
        if config.augment is None:
            tup = make_tuple(batch_values[row], var, config.dropout_rate, k,
                             policy, **kwargs)
        else:
            tup = make_policy_tuple(batch_values[row], var, config.augment, k,
                                    policy, **kwargs)
        anchors.append(tup.anchor)
        positives.append(tup.positive)
        negatives.append(np.stack(tup.negatives))

    def to64(arrs):
        return torch.as_tensor(np.stack(arrs), dtype=torch.float64)

    return to64(anchors), to64(positives), to64(negatives)


def train(config: TrainConfig, dataset: TimeSeriesDataset,
          init: Checkpoint | None = None) -> Checkpoint:
    """Optimize the model on the dataset's train split; returns the checkpoint.

    ``init`` resumes from a saved checkpoint: parameters and step/epoch
    counters carry over (optimizer state does not), so epoch and step budgets
    are cumulative. On a non-finite loss the raised error carries the
    last-good parameters in its ``last_good`` attribute.
    """
    torch.set_num_threads(1)  # bit-reproducible numeric path
    train_idx = dataset.split_indices("train")
    if train_idx.size == 0:
        raise TsfuseError("dataset has no training instances")
    policy = _resolve_policy(config, dataset.n_variables)

    torch.manual_seed(config.seed)
    model = TSFuseModel(config.encoder, config.fusion)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    epoch = 0
    loss_history: list[float] = []
    if init is not None:
        apply_checkpoint(model, init)
        epoch = init.epoch
        loss_history = list(init.loss_history)
    values = dataset.values
    steps_per_epoch = max(1, -(-train_idx.size // config.batch_size))

    def budget_left() -> bool:
        # max_steps, when set, is an exact step budget and overrides epochs
        if config.max_steps is not None:
            return len(loss_history) < config.max_steps
        return epoch < config.epochs

    while budget_left():
        epoch += 1
        for _ in range(steps_per_epoch):
            take = min(config.batch_size, train_idx.size)
            batch_idx = train_idx[rng.choice(train_idx.size, size=take, replace=False)]
            anchors, positives, negatives = build_batch(values, batch_idx, config,
                                                        policy, rng)
            b, k = negatives.shape[0], negatives.shape[1]
            flat_a = model(anchors).flat
            flat_p = model(positives).flat
            flat_n = model(negatives.reshape(b * k, *negatives.shape[2:])).flat
            flat_n = flat_n.reshape(b, k, -1)
            loss = contrastive_loss(flat_a, flat_p, flat_n, config.loss)
            if not torch.isfinite(loss):
                # raised before the update, so the model still holds the
                # parameters from the last finite step
                err = NonFiniteLoss(
                    f"non-finite loss at step {len(loss_history)}: {loss.item()}")
                err.last_good = snapshot(model, config, epoch, loss_history)
                raise err
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_history.append(float(loss.item()))
            if config.max_steps is not None and len(loss_history) >= config.max_steps:
                break
    return snapshot(model, config, epoch, loss_history)


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Finite-difference agreement per parameter group.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, floor);
    the floor guards noise-dominated near-zero entries. structure holds the
    assembled-gradient identities of the joint-feature head (max abs error).
    kink_crossings counts perturbations discarded because the two endpoint
    forwards landed on different smooth pieces of the loss.
    """

    group_errors: dict
    epsilon: float
    tolerance: float
    floor: float
    structure: dict
    passed: bool
    kink_crossings: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values())


class KinkTrace(TorchDispatchMode):
    """Record which smooth piece each nonsmooth op takes during a forward.

    relu contributes the sign pattern of its input and max pooling its argmax
    indices; these are the nonsmooth ops on the loss path (max reductions
    inside validation guards never reach the loss value, so their winners are
    deliberately not recorded). Two forwards with identical traces lie on one
    smooth piece of the loss, so a central difference across them samples a
    genuine derivative; a sign or index flip means the segment straddles a
    kink and the sample is meaningless.
    """

    def __init__(self):
        super().__init__()
        self.trace: list = []

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        name = func.overloadpacket.__name__
        if name in ("relu", "relu_"):
            # read the input before relu_ mutates it
            self.trace.append(args[0] > 0)
        out = func(*args, **(kwargs or {}))
        if name.startswith(("adaptive_max_pool", "max_pool")):
            self.trace.append(out[1])
        return out


def _same_piece(a: KinkTrace, b: KinkTrace) -> bool:
    return len(a.trace) == len(b.trace) and \
        all(torch.equal(x, y) for x, y in zip(a.trace, b.trace))


def _crosses_kink(loss_fn, flat, i, orig, epsilon) -> bool:
    # re-run the two endpoint forwards under tracing; values are already known
    traces = []
    for signed in (epsilon, -epsilon):
        flat[i] = orig + signed
        with KinkTrace() as trace:
            loss_fn()
        traces.append(trace)
    flat[i] = orig
    return not _same_piece(*traces)


def finite_difference_check(loss_fn, params: dict, epsilon: float = 1e-6,
                            tolerance: float = 1e-5, floor: float = 1e-3,
                            kink_guard: bool = True) -> tuple:
    """Max relative error between autograd and central differences per group.

    params maps group name -> tensor with requires_grad=True; loss_fn() must
    recompute the scalar loss from the current tensor values. Returns
    (errors, crossings), both keyed by group. With kink_guard, a perturbation
    that exceeds tolerance is re-evaluated under KinkTrace: if its two
    endpoints land on different smooth pieces (a relu flip or a pooling
    argmax change) it is counted in crossings and excluded from the error,
    because its central difference blends two one-sided slopes and cannot
    agree with the one-sided analytic gradient even when it is correct.
    Tracing only failing entries keeps the clean path free of dispatch
    overhead. A group whose every perturbation is discarded reports an
    infinite error rather than a vacuous pass.
    """
    if epsilon <= 0 or not np.isfinite(epsilon):
        raise NonFinitePerturbation(f"epsilon must be a positive real, got {epsilon}")
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    errors, crossings = {}, {}
    for name, p in params.items():
        grad = p.grad
        if grad is None:
            grad = torch.zeros_like(p)
        flat = p.data.view(-1)
        worst = 0.0
        crossed = 0
        valid = 0
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            hi = loss_fn().item()
            flat[i] = orig - epsilon
            lo = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFinitePerturbation(
                    f"perturbing {name}[{i}] produced a non-finite loss")
            numeric = (hi - lo) / (2 * epsilon)
            analytic = grad.flatten()[i].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if kink_guard and rel >= tolerance \
                    and _crosses_kink(loss_fn, flat, i, orig, epsilon):
                crossed += 1
                continue
            valid += 1
            worst = max(worst, rel)
        if flat.numel() and not valid:
            worst = float("inf")
        errors[name] = worst
        crossings[name] = crossed
    return errors, crossings


def _head_structure_check(model: TSFuseModel, maps: dict) -> dict:
    """Assemble the joint-head gradients by hand and compare with autograd.

    With pre = W_tᵀF_t0 + W_sᵀF_s0 + (UᵀF_t)∘(VᵀF_s), f = σ(pre) and
    L = <G, f>: dL/dW_t = F_t0 · Δᵀ and dL/dU = F_t · (Δ∘(VᵀF_s))ᵀ where
    Δ = G∘σ'(pre). The U identity shows the cross-domain coupling: the
    temporal projection's gradient carries the V-projected spectral map.
    """
    fusion = model.fusion
    f_t0 = maps["F_t0"].detach()
    f_s0 = maps["F_s0"].detach()
    f_t = maps["F_t"].detach()
    f_s = maps["F_s"].detach()
    gen = torch.Generator()
    gen.manual_seed(0)
    g = torch.randn(fusion.U.shape[1], model.encoder_config.d,
                    dtype=torch.float64, generator=gen)

    for p in (fusion.W_t, fusion.W_s, fusion.U, fusion.V):
        p.grad = None
    feature = joint_feature(f_t0, f_s0, f_t, f_s, fusion)
    scalar = (g * feature.joint).sum()
    scalar.backward()

    pre_t = torch.einsum("ml,md->ld", fusion.W_t, f_t0)
    pre_s = torch.einsum("nl,nd->ld", fusion.W_s, f_s0)
    bil = bilinear_pool_lowrank(f_t, f_s, fusion.U, fusion.V)
    sig = torch.sigmoid(pre_t + pre_s + bil)
    delta = g * sig * (1 - sig)
    want_wt = f_t0 @ delta.T
    v_proj = torch.einsum("nl,nd->ld", fusion.V, f_s)
    want_u = f_t @ (delta * v_proj).T
    out = {
        "W_t from F_t0 product": (fusion.W_t.grad - want_wt).abs().max().item(),
        "U couples F_t with V-projected F_s": (fusion.U.grad - want_u).abs().max().item(),
    }
    for p in (fusion.W_t, fusion.W_s, fusion.U, fusion.V):
        p.grad = None
    return out


def gradcheck(model: TSFuseModel, sample, epsilon: float = 1e-6,
              tolerance: float = 1e-5, floor: float = 1e-3,
              loss_config: LossConfig | None = None) -> GradCheckReport:
    """Verify analytic gradients of the full contrastive loss for every group.

    sample is an (anchors, positives, negatives) tensor triple as produced by
    build_batch. Central differences with the given epsilon; see
    GradCheckReport for the error definition.
    """
    loss_config = loss_config or LossConfig()
    anchors, positives, negatives = (torch.as_tensor(t, dtype=torch.float64)
                                     for t in sample)
    b, k = negatives.shape[0], negatives.shape[1]

    def loss_fn():
        flat_a = model(anchors).flat
        flat_p = model(positives).flat
        flat_n = model(negatives.reshape(b * k, *negatives.shape[2:])).flat
        return contrastive_loss(flat_a, flat_p, flat_n.reshape(b, k, -1), loss_config)

    params = dict(model.named_parameters())
    group_errors, crossings = finite_difference_check(
        loss_fn, params, epsilon=epsilon, tolerance=tolerance, floor=floor)
    structure = _head_structure_check(model, model.forward_maps(anchors[0]))
    passed = max(group_errors.values()) < tolerance \
        and max(structure.values()) < 1e-10
    return GradCheckReport(group_errors=group_errors, epsilon=epsilon,
                           tolerance=tolerance, floor=floor,
                           structure=structure, passed=passed,
                           kink_crossings=crossings)
