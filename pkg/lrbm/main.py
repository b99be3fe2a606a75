"""
Command-line entry point.

    python -m lrbm.main <command> [flags]

Commands: preprocess, train, predict, evaluate, robustness, synth, inspect,
features. Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
failure. LRBM_THREADS caps the per-class training pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import config
from .classify import ClassifierBundle, calibrate, evaluate, scores_for_samples, transitivity_defects
from .core import SequenceSample, hidden_features, interaction_spectrum
from .data import (
    NormStats,
    PreprocessConfig,
    RawSequence,
    average_bone_lengths,
    impute_missing,
    inject_missing,
    inject_noise,
    normalize_apply,
    normalize_fit,
    preprocess,
)
from .errors import ConfigError, ContractError, DataError, LrbmError, NumericalError
from .formats import (
    DatasetHeader,
    load_bundle,
    read_dataset,
    save_bundle,
    save_models,
    write_confusion_csv,
    write_curve_csv,
    write_dataset,
    write_features_csv,
    write_predictions_csv,
)
from .oracle import make_synthetic_dataset
from .train import TrainConfig, train_classifier_models
from .utils import derive_rng, load_json_file, save_json_file, thread_count, to_json

logger = logging.getLogger(__name__)

# Stream offset for the train/validation split, distinct from class indices
SPLIT_STREAM = 1_000_003


# --- shared helpers ---

def _parse_subset(text: Optional[str]) -> Optional[tuple]:
    if text is None or text.strip() == "":
        return None
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"--feature-subset must be comma-separated integers, got {text!r}")


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{flag} must be comma-separated numbers, got {text!r}")


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{flag} must be comma-separated integers, got {text!r}")


def _read_json(path: str, flag: str):
    """Loads a side JSON file named by a flag; malformed content is a data error."""
    try:
        return load_json_file(path)
    except json.JSONDecodeError as e:
        raise DataError(f"{flag} {path}: invalid JSON ({e.msg})")


def save_bone_lengths(path: str, topology: Sequence[int], lengths: np.ndarray) -> str:
    return save_json_file(path, {"topology": [int(p) for p in topology], "bone_lengths": lengths.tolist()})


def load_bone_lengths(path: str, topology: Sequence[int]) -> np.ndarray:
    """Reads lengths written by ``--fit-bones`` and checks they fit this skeleton."""
    payload = _read_json(path, "--bone-lengths")
    if not isinstance(payload, dict) or "bone_lengths" not in payload or "topology" not in payload:
        raise DataError(f"--bone-lengths {path}: expected an object with 'topology' and 'bone_lengths'")
    if payload["topology"] != [int(p) for p in topology]:
        raise DataError(f"--bone-lengths {path}: topology does not match the dataset header")
    try:
        lengths = np.array(payload["bone_lengths"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DataError(f"--bone-lengths {path}: malformed lengths ({e})")
    if lengths.shape != (len(topology),):
        raise DataError(f"--bone-lengths {path}: expected {len(topology)} lengths, got shape {lengths.shape}")
    return lengths


def prepare_samples(bundle: ClassifierBundle, raws: Sequence[RawSequence]) -> list[SequenceSample]:
    """Runs the bundle's preprocessing on raw sequences and checks model dimensions."""
    pre = bundle.preprocess or PreprocessConfig(smoothing_window=1, normalize=False)
    if pre.target_length is None:
        pre = PreprocessConfig(
            target_length=bundle.n_t if any(r.n_raw != bundle.n_t for r in raws) else None,
            smoothing_window=pre.smoothing_window,
            normalize=pre.normalize,
            feature_subset=pre.feature_subset,
        )
    samples = [preprocess(r, pre, bundle.norm_stats, bundle.bone_lengths) for r in raws]
    for sample in samples:
        if (sample.d, sample.n_t) != (bundle.d, bundle.n_t):
            raise ContractError(
                f"sample {sample.id!r} has shape {(sample.d, sample.n_t)}, bundle expects {(bundle.d, bundle.n_t)}"
            )
    return samples


def _group_by_label(samples: Sequence[SequenceSample]) -> tuple[list[str], list[list[SequenceSample]]]:
    labels = sorted({s.label for s in samples if s.label is not None})
    groups = [[s for s in samples if s.label == label] for label in labels]
    if any(s.label is None for s in samples):
        raise DataError("every training sample needs a label")
    return labels, groups


def _split(group: list, val_fraction: float, rng: np.random.Generator) -> tuple[list, list]:
    if val_fraction <= 0.0:
        return group, group
    order = rng.permutation(len(group))
    n_val = min(len(group) - 1, max(1, int(round(val_fraction * len(group)))))
    val = [group[k] for k in sorted(order[:n_val])]
    train = [group[k] for k in sorted(order[n_val:])]
    return train, val


# --- commands ---

def cmd_preprocess(
    in_path: str,
    out_path: str,
    target_length: Optional[int] = None,
    smooth_window: int = config.DEFAULT_SMOOTH_WINDOW,
    feature_subset: Optional[tuple] = None,
    skeleton: bool = False,
    fit_stats: Optional[str] = None,
    normalize_stats: Optional[str] = None,
    fit_bones: Optional[str] = None,
    bone_lengths_path: Optional[str] = None,
) -> str:
    """Applies the data pipeline to a dataset file and writes the result.

    Bone lengths and z-score statistics are either fitted on this input
    (``fit_bones``/``fit_stats`` write them out) or loaded from files
    fitted on the training set (``bone_lengths_path``/``normalize_stats``).
    """
    header, raws = read_dataset(in_path)
    pre = PreprocessConfig(target_length=target_length, smoothing_window=smooth_window, normalize=False, feature_subset=feature_subset)
    bone_lengths = None
    if skeleton or fit_bones is not None or bone_lengths_path is not None:
        if header.topology is None:
            raise DataError(f"{in_path} has no 'topology' in its header; skeleton renormalization needs one")
        if bone_lengths_path is not None:
            bone_lengths = load_bone_lengths(bone_lengths_path, header.topology)
        else:
            bone_lengths = average_bone_lengths(raws, header.topology)
            if fit_bones is not None:
                save_bone_lengths(fit_bones, header.topology, bone_lengths)
    samples = [preprocess(r, pre, None, bone_lengths) for r in raws]

    stats = None
    if normalize_stats is not None:
        payload = _read_json(normalize_stats, "--normalize-stats")
        try:
            stats = NormStats.from_dict(payload)
        except (KeyError, TypeError) as e:
            raise DataError(f"--normalize-stats {normalize_stats}: malformed statistics ({e})")
    elif fit_stats is not None:
        stats = normalize_fit(samples)
        save_json_file(fit_stats, stats.to_dict())
    if stats is not None:
        samples = [normalize_apply(s, stats) for s in samples]

    topology = header.topology if feature_subset is None else None
    return write_dataset(out_path, DatasetHeader(d=samples[0].d if samples else header.d, topology=topology), samples)


def cmd_train(
    dataset_path: str,
    out_path: str,
    cfg: TrainConfig,
    val_fraction: float = config.DEFAULT_VAL_FRACTION,
    pre: Optional[PreprocessConfig] = None,
    scoring: str = config.DEFAULT_SCORING,
    threads: Optional[int] = None,
    skeleton: bool = False,
) -> ClassifierBundle:
    """Trains one model per class, selects candidates, calibrates and writes the bundle.

    With ``skeleton`` the average bone lengths of this training file are
    stored in the bundle and applied to every sequence it later scores.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"--val-fraction must lie in [0, 1), got {val_fraction}")
    pre = pre or PreprocessConfig(smoothing_window=1)
    header, raws = read_dataset(dataset_path)
    if pre.target_length is None and len({r.n_raw for r in raws}) > 1:
        raise DataError("sequences have different lengths; pass --target-length")
    bone_lengths = None
    if skeleton:
        if header.topology is None:
            raise DataError(f"{dataset_path} has no 'topology' in its header; --skeleton needs one")
        bone_lengths = average_bone_lengths(raws, header.topology)
    samples = [preprocess(r, pre, None, bone_lengths) for r in raws]

    labels, groups = _group_by_label(samples)
    if len(labels) < 2:
        raise DataError(f"training needs at least 2 classes, found {len(labels)}")
    for label, group in zip(labels, groups):
        if len(group) < 2:
            raise DataError(f"class {label!r} has {len(group)} sample(s); at least 2 are required")

    split_rng = derive_rng(cfg.seed, SPLIT_STREAM)
    splits = [_split(group, val_fraction, split_rng) for group in groups]
    train_by_class = [train for train, _ in splits]
    val_by_class = [val for _, val in splits]

    stats = None
    if pre.normalize:
        stats = normalize_fit([s for group in train_by_class for s in group])
        train_by_class = [[normalize_apply(s, stats) for s in group] for group in train_by_class]
        val_by_class = [[normalize_apply(s, stats) for s in group] for group in val_by_class]

    logger.info(
        f"Training {len(labels)} classes x {cfg.candidates} candidates "
        f"(n_h={cfg.n_hidden}, epochs={cfg.epochs}, U {'learned' if cfg.learn_interactions else 'frozen'})"
    )
    models = train_classifier_models(train_by_class, val_by_class, cfg, cfg.seed, threads or thread_count())
    calibration = calibrate(models, val_by_class, labels, scoring)

    bundle = ClassifierBundle(
        models=tuple(models),
        calibration=calibration,
        norm_stats=stats,
        preprocess=pre,
        bone_lengths=bone_lengths,
        scoring=scoring,
        metadata={
            "train_config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "val_fraction": val_fraction,
            "n_train": [len(g) for g in train_by_class],
            "n_val": [len(g) for g in val_by_class],
        },
    )
    save_bundle(out_path, bundle)
    return bundle


def cmd_predict(bundle_path: str, dataset_path: str, out_path: str) -> np.ndarray:
    bundle = load_bundle(bundle_path)
    _, raws = read_dataset(dataset_path)
    samples = prepare_samples(bundle, raws)
    scores = scores_for_samples(bundle, samples)
    predicted = [bundle.class_labels[int(k)] for k in np.argmax(scores, axis=1)]
    write_predictions_csv(out_path, [s.id for s in samples], predicted, scores, bundle.class_labels)
    return scores


def cmd_evaluate(
    bundle_path: str,
    dataset_path: str,
    out_path: str,
    confusion_path: Optional[str] = None,
    groups_path: Optional[str] = None,
) -> dict:
    bundle = load_bundle(bundle_path)
    _, raws = read_dataset(dataset_path)
    samples = prepare_samples(bundle, raws)
    groups = None
    if groups_path:
        groups = _read_json(groups_path, "--groups")
        if not isinstance(groups, dict):
            raise DataError(f"--groups {groups_path}: expected an object mapping class label to group")
    report = evaluate(bundle, samples, groups)
    payload = report.to_dict()
    save_json_file(out_path, payload)
    write_confusion_csv(confusion_path or os.path.splitext(out_path)[0] + "_confusion.csv", report)
    logger.info(f"accuracy {report.accuracy:.4f}, macro accuracy {report.macro_accuracy:.4f}")
    return payload


def robustness_curve(
    bundle: ClassifierBundle,
    samples: Sequence[SequenceSample],
    mode: str,
    fractions: Sequence[float],
    seeds: Sequence[int],
) -> list[dict]:
    """Accuracy under corruption of model-ready (normalized) samples, per fraction."""
    if mode not in ("noise", "missing"):
        raise ConfigError(f"--mode must be 'noise' or 'missing', got {mode!r}")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    for fraction in fractions:
        if not 0.0 <= fraction <= config.MAX_CORRUPTION_FRACTION:
            raise ConfigError(f"corruption fraction {fraction} outside [0, {config.MAX_CORRUPTION_FRACTION}]")

    rows = []
    for fraction in fractions:
        accuracies = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            if mode == "noise":
                corrupted = [inject_noise(s, fraction, rng) for s in samples]
            else:
                corrupted = [impute_missing(inject_missing(s, fraction, rng)) for s in samples]
            accuracies.append(evaluate(bundle, corrupted).accuracy)
        rows.append({
            "mode": mode,
            "fraction": float(fraction),
            "mean_accuracy": float(np.mean(accuracies)),
            "std_accuracy": float(np.std(accuracies)),
            "n_seeds": len(accuracies),
        })
        logger.info(f"{mode} {fraction:.2f}: accuracy {rows[-1]['mean_accuracy']:.4f} +/- {rows[-1]['std_accuracy']:.4f}")
    return rows


def cmd_robustness(
    bundle_path: str,
    dataset_path: str,
    mode: str,
    fractions: Sequence[float],
    seeds: Sequence[int],
    out_path: str,
) -> list[dict]:
    bundle = load_bundle(bundle_path)
    _, raws = read_dataset(dataset_path)
    rows = robustness_curve(bundle, prepare_samples(bundle, raws), mode, fractions, seeds)
    write_curve_csv(out_path, rows)
    return rows


def cmd_synth(
    classes: int,
    per_class: int,
    separation: float,
    seed: int,
    out_path: str,
    models_path: Optional[str] = None,
    d: int = 3,
    n_t: int = 4,
    n_h: int = 8,
    interaction: Optional[float] = None,
) -> str:
    dataset = make_synthetic_dataset(classes, per_class, separation, seed, d=d, n_t=n_t, n_h=n_h, interaction=interaction)
    write_dataset(out_path, DatasetHeader(d=d), dataset.samples)
    if models_path:
        save_models(models_path, dataset.models, dataset.class_labels)
    return out_path


def cmd_inspect(bundle_path: str, out_path: Optional[str] = None) -> dict:
    bundle = load_bundle(bundle_path)
    models = []
    for label, model in zip(bundle.class_labels, bundle.models):
        models.append({
            "label": label,
            "dims": {"d": model.d, "n_t": model.n_t, "n_h": model.n_h},
            "lambda_max_U": interaction_spectrum(model),
            "norm_W": float(np.linalg.norm(model.W)),
            "norm_U": float(np.linalg.norm(model.U)),
            "mean_abs_b": float(np.mean(np.abs(model.b))) if model.n_h else 0.0,
            "provenance": model.provenance,
        })
    payload = {
        "class_labels": list(bundle.class_labels),
        "models": models,
        "C": bundle.calibration.C.tolist(),
        "alpha": bundle.calibration.alpha,
        "scoring": bundle.scoring,
        "transitivity_defects": transitivity_defects(bundle.calibration),
    }
    if out_path:
        save_json_file(out_path, payload)
    else:
        sys.stdout.write(to_json(payload))
    return payload


def cmd_features(bundle_path: str, dataset_path: str, out_path: str) -> str:
    """Exports P(h_j = 1 | V) of every sample under every class model."""
    bundle = load_bundle(bundle_path)
    _, raws = read_dataset(dataset_path)
    samples = prepare_samples(bundle, raws)
    features = [hidden_features(model, samples) for model in bundle.models]
    return write_features_csv(out_path, [s.id for s in samples], [s.label for s in samples], features, bundle.class_labels)


# --- argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrbm", description="Sequence classification with per-class LRBMs.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("preprocess", help="resample, smooth and normalize a dataset")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--target-length", type=int)
    p.add_argument("--smooth-window", type=int, default=config.DEFAULT_SMOOTH_WINDOW)
    p.add_argument("--feature-subset")
    p.add_argument("--skeleton", action="store_true", help="renormalize bones to this input's average lengths")
    p.add_argument("--fit-bones", help="fit average bone lengths on this input and write them here")
    p.add_argument("--bone-lengths", help="renormalize bones to the lengths in this file")
    p.add_argument("--fit-stats", help="fit z-score statistics on this input and write them here")
    p.add_argument("--normalize-stats", help="apply z-score statistics from this file")

    p = commands.add_parser("train", help="train, select and calibrate per-class models")
    p.add_argument("dataset")
    p.add_argument("output")
    p.add_argument("--n-hidden", type=int, default=config.DEFAULT_N_HIDDEN)
    p.add_argument("--epochs", type=int, default=config.DEFAULT_EPOCHS)
    p.add_argument("--learning-rate", type=float, default=config.DEFAULT_LEARNING_RATE)
    p.add_argument("--cd-steps", type=int, default=config.DEFAULT_CD_STEPS)
    p.add_argument("--mf-sweeps", type=int, default=config.DEFAULT_MF_SWEEPS)
    p.add_argument("--momentum", type=float, default=config.DEFAULT_MOMENTUM)
    p.add_argument("--weight-decay", type=float, default=config.DEFAULT_WEIGHT_DECAY)
    p.add_argument("--minibatch", type=int, default=config.DEFAULT_MINIBATCH)
    p.add_argument("--candidates", type=int, default=config.DEFAULT_CANDIDATES)
    p.add_argument("--stability-margin", type=float, default=config.DEFAULT_STABILITY_MARGIN)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--freeze-u", action="store_true", help="keep U at zero (standard RBM)")
    p.add_argument("--learn-visible-bias", action="store_true")
    p.add_argument("--stochastic-reconstruction", action="store_true")
    p.add_argument("--val-fraction", type=float, default=config.DEFAULT_VAL_FRACTION)
    p.add_argument("--target-length", type=int)
    p.add_argument("--smooth-window", type=int, default=1)
    p.add_argument("--feature-subset")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--scoring", choices=config.SCORING_MODES, default=config.DEFAULT_SCORING)
    p.add_argument("--skeleton", action="store_true", help="renormalize bones to the training average; stored in the bundle")

    p = commands.add_parser("predict", help="write predicted labels and scores as CSV")
    p.add_argument("bundle")
    p.add_argument("dataset")
    p.add_argument("output")

    p = commands.add_parser("evaluate", help="write a metrics report and confusion matrix")
    p.add_argument("bundle")
    p.add_argument("dataset")
    p.add_argument("output")
    p.add_argument("--confusion-csv")
    p.add_argument("--groups", help="JSON file mapping class label to group name")

    p = commands.add_parser("robustness", help="accuracy under noisy or missing data")
    p.add_argument("bundle")
    p.add_argument("dataset")
    p.add_argument("output")
    p.add_argument("--mode", choices=["noise", "missing"], required=True)
    p.add_argument("--fractions", default="0,0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--seeds", default="0,1,2,3,4")

    p = commands.add_parser("synth", help="sample a labelled dataset from random tiny models")
    p.add_argument("output")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--separation", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--models-out")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--n-t", type=int, default=4)
    p.add_argument("--n-h", type=int, default=8)
    p.add_argument("--interaction", type=float)

    p = commands.add_parser("inspect", help="dump model and calibration statistics")
    p.add_argument("bundle")
    p.add_argument("--output")

    p = commands.add_parser("features", help="export hidden posteriors as features")
    p.add_argument("bundle")
    p.add_argument("dataset")
    p.add_argument("output")
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == "preprocess":
        cmd_preprocess(
            args.input, args.output,
            target_length=args.target_length,
            smooth_window=args.smooth_window,
            feature_subset=_parse_subset(args.feature_subset),
            skeleton=args.skeleton,
            fit_stats=args.fit_stats,
            normalize_stats=args.normalize_stats,
            fit_bones=args.fit_bones,
            bone_lengths_path=args.bone_lengths,
        )
    elif args.command == "train":
        cfg = TrainConfig(
            epochs=args.epochs,
            learning_rate=args.learning_rate,
            cd_steps=args.cd_steps,
            mf_sweeps=args.mf_sweeps,
            momentum=args.momentum,
            weight_decay=args.weight_decay,
            minibatch=args.minibatch,
            candidates=args.candidates,
            stability_margin=args.stability_margin,
            seed=args.seed,
            learn_visible_bias=args.learn_visible_bias,
            n_hidden=args.n_hidden,
            learn_interactions=not args.freeze_u,
            stochastic_reconstruction=args.stochastic_reconstruction,
        )
        pre = PreprocessConfig(
            target_length=args.target_length,
            smoothing_window=args.smooth_window,
            normalize=not args.no_normalize,
            feature_subset=_parse_subset(args.feature_subset),
        )
        cmd_train(args.dataset, args.output, cfg, args.val_fraction, pre, args.scoring, skeleton=args.skeleton)
    elif args.command == "predict":
        cmd_predict(args.bundle, args.dataset, args.output)
    elif args.command == "evaluate":
        cmd_evaluate(args.bundle, args.dataset, args.output, args.confusion_csv, args.groups)
    elif args.command == "robustness":
        cmd_robustness(
            args.bundle, args.dataset, args.mode,
            _parse_floats(args.fractions, "--fractions"),
            _parse_ints(args.seeds, "--seeds"),
            args.output,
        )
    elif args.command == "synth":
        cmd_synth(
            args.classes, args.per_class, args.separation, args.seed, args.output,
            models_path=args.models_out, d=args.d, n_t=args.n_t, n_h=args.n_h, interaction=args.interaction,
        )
    elif args.command == "inspect":
        cmd_inspect(args.bundle, args.output)
    elif args.command == "features":
        cmd_features(args.bundle, args.dataset, args.output)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return config.EXIT_OK if e.code == 0 else config.EXIT_USAGE

    try:
        run(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return config.EXIT_USAGE
    except (DataError, ContractError) as e:
        logger.error(f"Data error: {e}")
        return config.EXIT_DATA
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return config.EXIT_NUMERICAL
    except FileNotFoundError as e:
        logger.error(f"File not found: {e}")
        return config.EXIT_DATA
    except LrbmError as e:
        logger.error(f"Unexpected error: {e}")
        return config.EXIT_DATA
    return config.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
