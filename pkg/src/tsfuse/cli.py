"""Command-line entry point.

Subcommands: ingest, train, eval, diagnose, sweep, bench-aug, gradcheck.
Exit codes: 0 ok, 2 bad input, 3 numeric failure, 4 incompatibility.
All randomness is seeded, so every command is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from .augment import POLICY_KINDS, AugmentPolicy
from .data import load_container, load_manifest, save_container, zscore_normalize
from .encoders import EncoderConfig
from .errors import (
    ConfigError,
    DomainError,
    HorizonExceedsData,
    InputTooShort,
    NoAnomaliesInTest,
    NonFiniteLoss,
    NonFinitePerturbation,
    ShapeMismatch,
    SingleClassSplit,
    TooFewSamples,
    TooShort,
    TsfuseError,
    VersionMismatch,
    ZeroNorm,
)
from .evaluate import (
    DecoderConfig,
    alignment_metric,
    alignment_pairs,
    anomaly_eval,
    build_forecast_targets,
    extract_representations,
    false_prediction_overlap,
    forecast_eval,
    linear_probe_classify,
    uniformity_metric,
)
from .fusion import FusionConfig
from .loss import LossConfig
from .model import TSFuseModel
from .train import (
    TrainConfig,
    _resolve_policy,
    build_batch,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_COMPAT = 4

_NUMERIC_ERRORS = (NonFiniteLoss, NonFinitePerturbation, DomainError)
_COMPAT_ERRORS = (VersionMismatch, InputTooShort, ShapeMismatch, TooShort,
                  ZeroNorm, SingleClassSplit, NoAnomaliesInTest,
                  HorizonExceedsData, TooFewSamples)


# --------------------------------------------------------------------------
# Experiment config
# --------------------------------------------------------------------------

_TOP_KEYS = {"dataset", "train", "eval", "outdir", "seed"}
_EVAL_KEYS = {"task", "l2_strength", "ridge_strength", "horizons", "window",
              "stride", "decoder", "threshold_policy", "fixed_threshold"}


def _reject_unknown(doc: dict, allowed: set, path: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key at {path}.{key}")


def _check_dataclass_keys(payload: dict, cls, path: str) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(payload, allowed, path)


@dataclasses.dataclass
class ExperimentConfig:
    """Validated experiment document: dataset ref, train config, eval block."""

    dataset: str
    outdir: str
    train: TrainConfig
    eval_settings: dict


def parse_experiment(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    _reject_unknown(doc, _TOP_KEYS, "$")
    for key in ("dataset", "outdir"):
        if key not in doc:
            raise ConfigError(f"missing required key $.{key}")

    train_doc = dict(doc.get("train", {}))
    _check_dataclass_keys(train_doc, TrainConfig, "$.train")
    for sub, cls in (("loss", LossConfig), ("encoder", EncoderConfig),
                     ("fusion", FusionConfig)):
        if isinstance(train_doc.get(sub), dict):
            _check_dataclass_keys(train_doc[sub], cls, f"$.train.{sub}")
    if "seed" in doc:
        train_doc["seed"] = doc["seed"]
    train_cfg = TrainConfig.from_dict(train_doc)

    eval_doc = dict(doc.get("eval", {}))
    _reject_unknown(eval_doc, _EVAL_KEYS, "$.eval")
    if isinstance(eval_doc.get("decoder"), dict):
        _check_dataclass_keys(eval_doc["decoder"], DecoderConfig, "$.eval.decoder")

    dataset = doc["dataset"]
    if not os.path.isabs(dataset):
        dataset = os.path.normpath(os.path.join(base_dir, dataset))
    return ExperimentConfig(dataset=dataset, outdir=doc["outdir"],
                            train=train_cfg, eval_settings=eval_doc)


def apply_override(doc: dict, spec: str) -> None:
    """Set one dotted-path leaf, e.g. fusion.loops=1 or train.seed=7.

    Paths that do not start with a top-level key are taken relative to the
    train block. Values parse as JSON, falling back to bare strings.
    """
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like path=value")
    path, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    if keys[0] not in _TOP_KEYS:
        keys = ["train"] + keys
    node = doc
    for key in keys[:-1]:
        nxt = node.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot override through non-object {key!r}")
        node = nxt
    node[keys[-1]] = value


def load_experiment(args) -> ExperimentConfig:
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    for spec in getattr(args, "set", None) or []:
        apply_override(doc, spec)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    for flag in ("epochs", "max_steps"):
        if getattr(args, flag, None) is not None:
            doc.setdefault("train", {})[flag] = getattr(args, flag)
    return parse_experiment(doc, base_dir=os.path.dirname(os.path.abspath(args.config)))


def load_dataset(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"dataset not found: {path}")
    if path.endswith(".json"):
        return load_manifest(path)
    dataset, _ = load_container(path)
    return dataset


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: str, header: list, rows: list) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    dataset = load_manifest(args.manifest)
    stats = None
    if not args.raw:
        dataset, stats = zscore_normalize(dataset)
    os.makedirs(args.outdir, exist_ok=True)
    name = dataset.manifest.get("name", "dataset")
    container = os.path.join(args.outdir, f"{name}.bin")
    save_container(dataset, container, stats)

    n, d, t = dataset.values.shape
    print(f"ingested {name}: N={n} D={d} T={t} label_kind={dataset.label_kind}")
    for tag in ("train", "val", "test"):
        print(f"  split {tag}: {int(np.sum(dataset.split_tag == tag))}")
    if dataset.label_kind == "class":
        values, counts = np.unique(dataset.labels, return_counts=True)
        for value, count in zip(values, counts):
            print(f"  class {value}: {count}")
    elif dataset.label_kind == "anomaly":
        rate = float(dataset.labels.sum()) / (n * t)
        print(f"  anomaly rate: {rate:.6f}")
    print(f"wrote {container}")
    return EXIT_OK


def _loss_csv_rows(history: list) -> list:
    # repr() floats so the file is bitwise reproducible
    return [[step, repr(value)] for step, value in enumerate(history)]


def cmd_train(args) -> int:
    exp = load_experiment(args)
    dataset = load_dataset(exp.dataset)
    init = load_checkpoint(args.resume) if args.resume else None
    os.makedirs(exp.outdir, exist_ok=True)

    def emit(ckpt) -> str:
        path = os.path.join(exp.outdir, f"ckpt-{ckpt.epoch}.bin")
        save_checkpoint(ckpt, path)
        _write_csv(os.path.join(exp.outdir, "loss-history.csv"),
                   ["step", "loss"], _loss_csv_rows(ckpt.loss_history))
        return path

    try:
        checkpoint = train(exp.train, dataset, init=init)
    except NonFiniteLoss as err:
        path = emit(err.last_good)
        print(f"error: {err}", file=sys.stderr)
        print(f"last-good checkpoint retained at {path}", file=sys.stderr)
        return EXIT_NUMERIC

    path = emit(checkpoint)
    final = checkpoint.loss_history[-1] if checkpoint.loss_history else float("nan")
    print(f"trained {len(checkpoint.loss_history)} steps "
          f"({checkpoint.epoch} epochs), final loss {final:.6f}")
    print(f"wrote {path}")
    return EXIT_OK


def _eval_setting(args, exp: ExperimentConfig, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return exp.eval_settings.get(key, default)


def cmd_eval(args) -> int:
    exp = load_experiment(args)
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data or exp.dataset)

    if args.task == "classify":
        reps = extract_representations(checkpoint, dataset)
        report = linear_probe_classify(
            reps, l2_strength=_eval_setting(args, exp, "l2_strength", 1.0))
    elif args.task == "forecast":
        horizons = _eval_setting(args, exp, "horizons", [1])
        window = int(_eval_setting(args, exp, "window", 32))
        stride = int(_eval_setting(args, exp, "stride", window // 2 or 1))
        windows, targets = build_forecast_targets(dataset, window, stride, horizons)
        reps = extract_representations(checkpoint, windows)
        report = forecast_eval(
            reps, targets,
            ridge_strength=_eval_setting(args, exp, "ridge_strength", 1.0))
    else:  # anomaly
        decoder_doc = dict(exp.eval_settings.get("decoder", {}))
        decoder = DecoderConfig(**decoder_doc)
        policy = _eval_setting(args, exp, "threshold_policy", "best-f1")
        if policy == "fixed":
            policy = "fixed-value"
        tau = args.tau if args.tau is not None \
            else exp.eval_settings.get("fixed_threshold")
        report = anomaly_eval(checkpoint, decoder, dataset, policy,
                              fixed_threshold=tau)

    out = args.out or os.path.join(exp.outdir, f"report-{args.task}.json")
    _write_json(out, report.to_dict())
    for name, value in report.metrics.items():
        print(f"{name}: {value}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    exp = load_experiment(args)
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data or exp.dataset)
    os.makedirs(exp.outdir, exist_ok=True)

    view_a, view_b = alignment_pairs(checkpoint, dataset, seed=args.seed or 0)
    alignment = alignment_metric(view_a, view_b)
    reps = extract_representations(checkpoint, dataset)
    uniformity = uniformity_metric(reps.reps)

    edges = alignment["bin_edges"]
    _write_csv(os.path.join(exp.outdir, "alignment-histogram.csv"),
               ["bin_lo", "bin_hi", "count"],
               [[repr(edges[i]), repr(edges[i + 1]), c]
                for i, c in enumerate(alignment["histogram"])])

    payload = {"alignment_mean": alignment["mean"], "uniformity": uniformity}
    if dataset.label_kind == "class":
        payload["overlap"] = false_prediction_overlap(checkpoint, dataset).to_dict()
    else:
        payload["overlap"] = {"skipped": "needs class labels"}
    _write_json(os.path.join(exp.outdir, "diagnostics.json"), payload)

    print(f"alignment mean: {alignment['mean']}")
    print(f"uniformity: {uniformity}")
    if "n_overlap" in payload["overlap"]:
        o = payload["overlap"]
        print(f"false-prediction overlap: {o['n_overlap']} "
              f"(temporal errors {o['n_temporal_errors']}, "
              f"spectral errors {o['n_spectral_errors']})")
    print(f"wrote {os.path.join(exp.outdir, 'diagnostics.json')}")
    return EXIT_OK


_SWEEP_LEAVES = {
    "dropout_rate": ("dropout_rate", float),
    "temperature": ("loss.temperature", float),
    "loops": ("fusion.loops", int),
}


def _probe_accuracy(checkpoint, dataset, l2_strength=1.0) -> tuple:
    reps = extract_representations(checkpoint, dataset)
    report = linear_probe_classify(reps, l2_strength)
    return report.metrics["accuracy"], report.metrics["auprc"]


def cmd_sweep(args) -> int:
    exp = load_experiment(args)
    dataset = load_dataset(exp.dataset)
    leaf, cast = _SWEEP_LEAVES[args.parameter]
    os.makedirs(exp.outdir, exist_ok=True)

    rows = []
    for raw in args.values.split(","):
        value = cast(raw)
        doc = exp.train.to_dict()
        node = doc
        keys = leaf.split(".")
        for key in keys[:-1]:
            node = node[key]
        node[keys[-1]] = value
        try:
            checkpoint = train(TrainConfig.from_dict(doc), dataset)
            accuracy, auprc = _probe_accuracy(checkpoint, dataset)
            rows.append([args.parameter, raw, repr(accuracy), repr(auprc), "ok", ""])
            print(f"{args.parameter}={raw}: accuracy {accuracy:.4f}")
        except TsfuseError as err:  # record the cell, keep sweeping
            rows.append([args.parameter, raw, "", "", "error", str(err)])
            print(f"{args.parameter}={raw}: error {err}")

    path = os.path.join(exp.outdir, f"sweep-{args.parameter}.csv")
    _write_csv(path, ["parameter", "value", "accuracy", "auprc", "status", "message"],
               rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bench_aug(args) -> int:
    exp = load_experiment(args)
    dataset = load_dataset(exp.dataset)
    os.makedirs(exp.outdir, exist_ok=True)
    kinds = args.policies.split(",") if args.policies else list(POLICY_KINDS)

    rows = []
    for kind in kinds:
        accuracies = []
        try:
            params = {"rate": exp.train.dropout_rate} if kind == "dropout" else {}
            for repeat in range(args.repeats):
                doc = exp.train.to_dict()
                doc["augment"] = AugmentPolicy(kind, params).to_dict()
                doc["seed"] = exp.train.seed + repeat
                checkpoint = train(TrainConfig.from_dict(doc), dataset)
                accuracy, _ = _probe_accuracy(checkpoint, dataset)
                accuracies.append(accuracy)
            mean = float(np.mean(accuracies))
            variance = float(np.var(accuracies))
            rows.append([kind, repr(mean), repr(variance), len(accuracies), "ok", ""])
            print(f"{kind}: mean accuracy {mean:.4f}, variance {variance:.6f}")
        except TsfuseError as err:
            rows.append([kind, "", "", len(accuracies), "error", str(err)])
            print(f"{kind}: error {err}")

    path = os.path.join(exp.outdir, "bench-aug.csv")
    _write_csv(path, ["policy", "mean_accuracy", "variance", "n_runs",
                      "status", "message"], rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    exp = load_experiment(args)
    dataset = load_dataset(exp.dataset)
    config = exp.train

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).build_model()
    else:
        torch.manual_seed(config.seed)
        model = TSFuseModel(config.encoder, config.fusion)

    rng = np.random.default_rng(config.seed)
    train_idx = dataset.split_indices("train")
    take = min(config.batch_size, train_idx.size)
    policy = _resolve_policy(config, dataset.n_variables)

    # The loss is piecewise smooth (relu blocks, max pooling): a batch can
    # land within epsilon of a kink, where central differences blend the two
    # one-sided slopes and disagree with autograd. A wrong gradient fails on
    # every batch, so only trust a failure that survives fresh draws.
    failed_draws = 0
    for attempt in range(3):
        sample = build_batch(dataset.values, train_idx[:take], config, policy,
                             rng)
        report = gradcheck(model, sample, loss_config=config.loss)
        if report.passed:
            break
        failed_draws = attempt + 1

    payload = dataclasses.asdict(report)
    payload["max_error"] = report.max_error
    payload["failed_draws"] = failed_draws
    out = args.out or os.path.join(exp.outdir, "gradcheck.json")
    _write_json(out, payload)
    print(f"max relative error: {report.max_error:.3e} "
          f"(tolerance {report.tolerance:.0e})")
    print(f"gradient structure error: {max(report.structure.values()):.3e}")
    if report.passed and failed_draws:
        print(f"note: {failed_draws} batch draw(s) landed near a nonsmooth "
              f"point and failed finite differences; passed on a fresh draw")
    print("PASS" if report.passed else "FAIL")
    print(f"wrote {out}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# --------------------------------------------------------------------------
# Parser and entry point
# --------------------------------------------------------------------------

def _add_config_flags(sub, seed=True):
    sub.add_argument("--config", required=True, help="experiment config JSON")
    sub.add_argument("--set", action="append", metavar="PATH=VALUE",
                     help="override a config leaf, e.g. fusion.loops=1")
    if seed:
        sub.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsfuse",
        description="Self-supervised time-series representations with "
                    "temporal-spectral fusion")
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("ingest", help="validate, normalize, and pack a dataset")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--outdir", required=True)
    p.add_argument("--raw", action="store_true",
                   help="skip z-score normalization")
    p.set_defaults(func=cmd_ingest)

    p = subs.add_parser("train", help="optimize a model on a dataset")
    _add_config_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="run a downstream task head")
    _add_config_flags(p, seed=False)
    p.add_argument("--task", required=True,
                   choices=("classify", "forecast", "anomaly"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset container or manifest "
                                  "(default: the config's dataset)")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--l2", dest="l2_strength", type=float)
    p.add_argument("--ridge", dest="ridge_strength", type=float)
    p.add_argument("--horizons", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--threshold-policy", dest="threshold_policy",
                   choices=("best-f1", "fixed"))
    p.add_argument("--tau", type=float, help="fixed anomaly threshold")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("diagnose",
                        help="alignment, uniformity, and probe-overlap reports")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_diagnose)

    p = subs.add_parser("sweep", help="train once per parameter value")
    _add_config_flags(p)
    p.add_argument("--parameter", required=True, choices=sorted(_SWEEP_LEAVES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("bench-aug",
                        help="compare augmentation policies over repeated seeds")
    _add_config_flags(p)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--policies", help="comma-separated subset (default: all)")
    p.set_defaults(func=cmd_bench_aug)

    p = subs.add_parser("gradcheck",
                        help="verify analytic gradients by finite differences")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="check a trained model instead of a "
                                        "fresh initialization")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_INPUT
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except _COMPAT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_COMPAT
    except TsfuseError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
