"""Instance-level contrastive tuple construction and baseline augmentations.

The contrastive view pair comes from two independent dropout masks over the
same series; negatives are other variables of the same instance (multivariate)
or other instances of the batch (univariate fallback). The remaining policies
exist for benchmarking against the dropout view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import BadPolicyParams, NotEnoughNegatives, RateOutOfRange, TsfuseError


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dropout_augment(x: np.ndarray, rate: float, seed) -> np.ndarray:
    """Zero each scalar independently with probability ``rate``.

    Survivors are scaled by 1/(1-rate) (inverted dropout) so the expected
    value of every position is unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise RateOutOfRange(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    rng = _rng(seed)
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate)


@dataclass
class ContrastiveTuple:
    """Anchor/positive views of one series plus its negative samples.

    anchor, positive: [D_sel, T]; negatives: list of [D_sel, T].
    Sources are (kind, index) pairs for traceability.
    """

    anchor: np.ndarray
    positive: np.ndarray
    negatives: list
    anchor_source: tuple
    negative_sources: list

    def __post_init__(self):
        if self.anchor.shape != self.positive.shape:
            raise TsfuseError("anchor and positive must share a shape")
        for neg, src in zip(self.negatives, self.negative_sources):
            if neg.shape != self.anchor.shape:
                raise TsfuseError("negative shape mismatch")
            if src == self.anchor_source:
                raise TsfuseError("negative shares its source with the anchor")


def _check_instance(X: np.ndarray, anchor_variable: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise TsfuseError(f"instance must be [D, T], got shape {X.shape}")
    if not 0 <= anchor_variable < X.shape[0]:
        raise TsfuseError(
            f"anchor_variable {anchor_variable} out of range for D={X.shape[0]}")
    return X


def _draw_negatives(X: np.ndarray, anchor_variable: int, n_negatives: int,
                    negative_policy: str, rng: np.random.Generator,
                    batch: np.ndarray | None, instance_id: int | None):
    """Negatives are raw series, not augmented."""
    d = X.shape[0]
    if negative_policy == "other-variables":
        candidates = [v for v in range(d) if v != anchor_variable]
        if len(candidates) < max(1, n_negatives):
            raise NotEnoughNegatives(
                f"need {n_negatives} negatives from {len(candidates)} other variables")
        chosen = rng.choice(len(candidates), size=n_negatives, replace=False)
        negatives = [X[candidates[int(c)]:candidates[int(c)] + 1] for c in chosen]
        sources = [("var", candidates[int(c)]) for c in chosen]
        anchor_source = ("var", anchor_variable)
    elif negative_policy == "other-instances":
        if batch is None or instance_id is None:
            raise NotEnoughNegatives("other-instances policy requires batch and instance_id")
        batch = np.asarray(batch, dtype=np.float64)
        candidates = [i for i in range(batch.shape[0]) if i != instance_id]
        if len(candidates) < max(1, n_negatives):
            raise NotEnoughNegatives(
                f"need {n_negatives} negatives from {len(candidates)} other instances")
        chosen = rng.choice(len(candidates), size=n_negatives, replace=False)
        negatives = [batch[candidates[int(c)], anchor_variable:anchor_variable + 1]
                     for c in chosen]
        sources = [("instance", candidates[int(c)]) for c in chosen]
        anchor_source = ("instance", instance_id)
    else:
        raise TsfuseError(f"unknown negative_policy {negative_policy!r}")
    return negatives, sources, anchor_source


def make_tuple(X: np.ndarray, anchor_variable: int, rate: float, n_negatives: int,
               negative_policy: str = "other-variables", seed=0,
               batch: np.ndarray | None = None,
               instance_id: int | None = None) -> ContrastiveTuple:
    """Build one contrastive tuple around variable ``anchor_variable`` of X.

    negative_policy "other-variables" draws negatives from X's other rows;
    "other-instances" draws the same variable from other instances of
    ``batch`` (required then, with ``instance_id`` locating X inside it).
    Negatives are raw series, not dropped out.
    """
    X = _check_instance(X, anchor_variable)
    rng = _rng(seed)
    x = X[anchor_variable:anchor_variable + 1]
    anchor = dropout_augment(x, rate, rng)
    positive = dropout_augment(x, rate, rng)
    negatives, sources, anchor_source = _draw_negatives(
        X, anchor_variable, n_negatives, negative_policy, rng, batch, instance_id)
    return ContrastiveTuple(anchor, positive, negatives, anchor_source, sources)


# --------------------------------------------------------------------------
# Baseline augmentation policies
# --------------------------------------------------------------------------

POLICY_KINDS = ("dropout", "jitter", "scaling", "rotation", "magnitude_warp",
                "permutation", "slicing", "time_warp", "window_warp")

_DEFAULTS = {
    "dropout": {"rate": 0.1},
    "jitter": {"sigma": 0.1},
    "scaling": {"sigma": 0.1},
    "rotation": {},
    "magnitude_warp": {"sigma": 0.2, "knots": 4},
    "permutation": {"n_segments": 4},
    "slicing": {"crop_ratio": 0.9},
    "time_warp": {"sigma": 0.2, "knots": 4},
    "window_warp": {"window_ratio": 0.1, "scales": (0.5, 2.0)},
}


@dataclass
class AugmentPolicy:
    """One named augmentation with validated, kind-specific parameters."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise BadPolicyParams(f"unknown policy kind {self.kind!r}")
        merged = dict(_DEFAULTS[self.kind])
        for key, value in self.params.items():
            if key not in merged:
                raise BadPolicyParams(f"{self.kind}: unknown parameter {key!r}")
            merged[key] = value
        self.params = merged
        self._validate()

    def _validate(self):
        p = self.params
        if self.kind == "dropout" and not 0 <= p["rate"] < 1:
            raise BadPolicyParams(f"dropout rate must lie in [0, 1), got {p['rate']}")
        if self.kind in ("jitter", "scaling", "magnitude_warp", "time_warp") \
                and p["sigma"] < 0:
            raise BadPolicyParams(f"{self.kind}: sigma must be >= 0")
        if self.kind in ("magnitude_warp", "time_warp") and int(p["knots"]) < 2:
            raise BadPolicyParams(f"{self.kind}: need at least 2 knots")
        if self.kind == "permutation" and int(p["n_segments"]) < 1:
            raise BadPolicyParams("permutation: n_segments must be >= 1")
        if self.kind == "slicing" and not 0 < p["crop_ratio"] <= 1:
            raise BadPolicyParams("slicing: crop_ratio must lie in (0, 1]")
        if self.kind == "window_warp":
            if not 0 < p["window_ratio"] < 1:
                raise BadPolicyParams("window_warp: window_ratio must lie in (0, 1)")
            if len(p["scales"]) == 0 or any(s <= 0 for s in p["scales"]):
                raise BadPolicyParams("window_warp: scales must be positive")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed}
        out.update({k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in self.params.items()})
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "AugmentPolicy":
        payload = dict(payload)
        kind = payload.pop("kind", None)
        seed = payload.pop("seed", 0)
        if kind is None:
            raise BadPolicyParams("policy config needs a 'kind' key")
        return cls(kind, payload, seed)


def _smooth_curve(rng, t: int, knots: int, sigma: float, n_rows: int) -> np.ndarray:
    """[n_rows, T] smooth curves around 1.0 via cubic splines through knots."""
    positions = np.linspace(0, t - 1, knots + 2)
    values = 1.0 + sigma * rng.standard_normal((n_rows, knots + 2))
    steps = np.arange(t)
    return np.stack([CubicSpline(positions, values[r])(steps) for r in range(n_rows)])


def _resample_rows(block: np.ndarray, t_out: int) -> np.ndarray:
    """Linear resample each row of [D, L] to length t_out."""
    d, length = block.shape
    if length == 1:
        return np.repeat(block, t_out, axis=1)
    grid = np.linspace(0.0, length - 1, t_out)
    return np.stack([np.interp(grid, np.arange(length), block[v]) for v in range(d)])


def apply_policy(x: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    """Apply one augmentation policy; output shape equals input shape."""
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise TsfuseError(f"series must be [D, T] or [T], got shape {np.shape(x)}")
    d, t = arr.shape
    rng = _rng(policy.seed)
    p = policy.params
    kind = policy.kind

    if kind == "dropout":
        out = dropout_augment(arr, p["rate"], rng)
    elif kind == "jitter":
        out = arr + p["sigma"] * rng.standard_normal(arr.shape)
    elif kind == "scaling":
        out = arr * (1.0 + p["sigma"] * rng.standard_normal())
    elif kind == "rotation":
        signs = rng.choice([-1.0, 1.0], size=d)
        out = arr * signs[:, None]
    elif kind == "magnitude_warp":
        out = arr * _smooth_curve(rng, t, int(p["knots"]), p["sigma"], d)
    elif kind == "permutation":
        k = min(int(p["n_segments"]), t)
        segments = np.array_split(np.arange(t), k)
        order = rng.permutation(k)
        out = arr[:, np.concatenate([segments[i] for i in order])]
    elif kind == "slicing":
        crop_len = max(2, int(round(p["crop_ratio"] * t)))
        crop_len = min(crop_len, t)
        start = int(rng.integers(0, t - crop_len + 1))
        out = _resample_rows(arr[:, start:start + crop_len], t)
    elif kind == "time_warp":
        # positive speeds from a smooth curve -> monotone cumulative warp
        speeds = np.exp(_smooth_curve(rng, t, int(p["knots"]), p["sigma"], 1)[0] - 1.0)
        warp = np.concatenate([[0.0], np.cumsum(speeds[:-1])])
        warp *= (t - 1) / warp[-1]
        out = np.stack([np.interp(warp, np.arange(t), arr[v]) for v in range(d)])
    elif kind == "window_warp":
        win_len = max(2, int(round(p["window_ratio"] * t)))
        win_len = min(win_len, t)
        start = int(rng.integers(0, t - win_len + 1))
        scale = p["scales"][int(rng.integers(0, len(p["scales"])))]
        new_len = max(2, int(round(win_len * scale)))
        window = _resample_rows(arr[:, start:start + win_len], new_len)
        stitched = np.concatenate([arr[:, :start], window, arr[:, start + win_len:]], axis=1)
        out = _resample_rows(stitched, t)
    else:  # pragma: no cover - guarded by AugmentPolicy
        raise BadPolicyParams(f"unknown policy kind {kind!r}")

    return out[0] if squeeze else out


def make_policy_tuple(X: np.ndarray, anchor_variable: int, policy: AugmentPolicy,
                      n_negatives: int, negative_policy: str = "other-variables",
                      seed=0, batch: np.ndarray | None = None,
                      instance_id: int | None = None) -> ContrastiveTuple:
    """Like make_tuple, but the two views come from ``policy`` instead of dropout.

    Used by the augmentation benchmark; the two views get independent seeds
    drawn from ``seed`` and negatives are selected exactly as in make_tuple.
    """
    X = _check_instance(X, anchor_variable)
    rng = _rng(seed)
    x = X[anchor_variable:anchor_variable + 1]
    views = []
    for _ in range(2):
        view_rng = np.random.default_rng(int(rng.integers(0, 2 ** 63 - 1)))
        views.append(apply_policy(x, AugmentPolicy(policy.kind, dict(policy.params),
                                                   view_rng)))
    negatives, sources, anchor_source = _draw_negatives(
        X, anchor_variable, n_negatives, negative_policy, rng, batch, instance_id)
    return ContrastiveTuple(views[0], views[1], negatives, anchor_source, sources)
