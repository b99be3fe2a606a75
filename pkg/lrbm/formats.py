"""
File formats: JSON Lines datasets, model and bundle JSON, CSV reports.

Floats are written with repr precision and keys sorted, so loading what
was saved is bit-exact and re-saving is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import config
from .classify import ClassifierBundle, EvaluationReport, PairwiseCalibration
from .core import LrbmModel, SequenceSample
from .data import NormStats, PreprocessConfig, RawSequence
from .errors import DataError
from .utils import load_json_file, save_json_file, save_text_file, to_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetHeader:
    d: int
    version: int = config.DATASET_VERSION
    topology: Optional[tuple] = None

    def to_dict(self) -> dict:
        payload = {"format": config.DATASET_FORMAT, "version": self.version, "d": self.d}
        if self.topology is not None:
            payload["topology"] = list(self.topology)
        return payload


# --- datasets ---

def _parse_frames(raw_frames, d: int, line_no: int) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(raw_frames, list) or not raw_frames:
        raise DataError(f"line {line_no}: 'frames' must be a non-empty array of frames")
    values = np.zeros((d, len(raw_frames)))
    missing = np.zeros((d, len(raw_frames)), dtype=bool)
    for t, frame in enumerate(raw_frames):
        if not isinstance(frame, list) or len(frame) != d:
            raise DataError(f"line {line_no}: frame {t} must be an array of {d} numbers")
        for s, entry in enumerate(frame):
            if entry is None:
                missing[s, t] = True
            elif isinstance(entry, (int, float)) and not isinstance(entry, bool) and math.isfinite(entry):
                values[s, t] = float(entry)
            else:
                raise DataError(f"line {line_no}: frame {t} component {s} is not a finite number")
    return values, missing


def read_dataset(path: str) -> tuple[DatasetHeader, list[RawSequence]]:
    """Reads a JSON Lines dataset; errors name the offending 1-based line."""
    sequences = []
    header = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {line_no}: invalid JSON ({e.msg})")
            if not isinstance(record, dict):
                raise DataError(f"{path}: line {line_no}: expected a JSON object")
            if header is None:
                if record.get("format") != config.DATASET_FORMAT:
                    raise DataError(f"{path}: line {line_no}: missing '{config.DATASET_FORMAT}' header")
                if record.get("version") != config.DATASET_VERSION:
                    raise DataError(f"{path}: line {line_no}: unsupported dataset version {record.get('version')!r}")
                d = record.get("d")
                if not isinstance(d, int) or d < 1:
                    raise DataError(f"{path}: line {line_no}: header 'd' must be a positive integer")
                topology = record.get("topology")
                header = DatasetHeader(d=d, topology=tuple(topology) if topology is not None else None)
                continue
            try:
                values, missing = _parse_frames(record.get("frames"), header.d, line_no)
                label = record.get("label")
                sequences.append(RawSequence(
                    frames=values,
                    label=str(label) if label is not None else None,
                    id=str(record.get("id", f"line-{line_no}")),
                    topology=header.topology,
                    missing=missing,
                ))
            except DataError as e:
                raise DataError(f"{path}: {e}" if str(e).startswith("line") else f"{path}: line {line_no}: {e}")
    if header is None:
        raise DataError(f"{path}: empty dataset file")
    logger.info(f"Read {len(sequences)} sequences (d={header.d}) from {path}")
    return header, sequences


def _frames_to_json(frames: np.ndarray, missing: Optional[np.ndarray] = None) -> list:
    rows = frames.T.tolist()
    if missing is not None and missing.any():
        for t, s in zip(*np.nonzero(missing.T)):
            rows[t][s] = None
    return rows


def dataset_text(header: DatasetHeader, samples: Sequence[Union[SequenceSample, RawSequence]]) -> str:
    lines = [json.dumps(header.to_dict(), sort_keys=True)]
    for sample in samples:
        missing = sample.missing if isinstance(sample, RawSequence) else None
        record = {"id": sample.id, "label": sample.label, "frames": _frames_to_json(sample.frames, missing)}
        lines.append(json.dumps(record, sort_keys=True, allow_nan=False))
    return "\n".join(lines) + "\n"


def write_dataset(path: str, header: DatasetHeader, samples: Sequence[Union[SequenceSample, RawSequence]]) -> str:
    return save_text_file(path, dataset_text(header, samples))


# --- models ---

def model_to_dict(model: LrbmModel) -> dict:
    rows, cols = np.triu_indices(model.d, k=1)
    return {
        "dims": {"d": model.d, "n_t": model.n_t, "n_h": model.n_h},
        "a": model.a.tolist(),
        "b": model.b.tolist(),
        "W": model.W.tolist(),
        "U": model.U[rows, cols].tolist(),
        "provenance": dict(model.provenance),
    }


def model_from_dict(payload: dict) -> LrbmModel:
    try:
        dims = payload["dims"]
        d, n_t, n_h = int(dims["d"]), int(dims["n_t"]), int(dims["n_h"])
        U = np.zeros((d, d))
        rows, cols = np.triu_indices(d, k=1)
        U[rows, cols] = np.array(payload["U"], dtype=np.float64)
        U[cols, rows] = U[rows, cols]
        return LrbmModel(
            a=np.array(payload["a"], dtype=np.float64).reshape(d, n_t),
            b=np.array(payload["b"], dtype=np.float64).reshape(n_h),
            W=np.array(payload["W"], dtype=np.float64).reshape(n_t, n_h, d),
            U=U,
            provenance=dict(payload.get("provenance", {})),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed model record: {e}")


def save_models(path: str, models: Sequence[LrbmModel], class_labels: Sequence[str]) -> str:
    payload = {
        "format": config.MODELS_FORMAT,
        "class_labels": list(class_labels),
        "models": [model_to_dict(m) for m in models],
    }
    return save_json_file(path, payload)


def load_models(path: str) -> tuple[list[LrbmModel], list[str]]:
    payload = load_json_file(path)
    if payload.get("format") != config.MODELS_FORMAT:
        raise DataError(f"{path} is not a '{config.MODELS_FORMAT}' file")
    return [model_from_dict(m) for m in payload["models"]], list(payload["class_labels"])


# --- bundles ---

def bundle_to_dict(bundle: ClassifierBundle) -> dict:
    return {
        "format": config.BUNDLE_FORMAT,
        "version": config.BUNDLE_VERSION,
        "class_labels": list(bundle.class_labels),
        "models": [model_to_dict(m) for m in bundle.models],
        "C": bundle.calibration.upper.tolist(),
        "alpha": bundle.calibration.alpha,
        "scoring": bundle.scoring,
        "norm_stats": bundle.norm_stats.to_dict() if bundle.norm_stats is not None else None,
        "preprocess": bundle.preprocess.to_dict() if bundle.preprocess is not None else None,
        "bone_lengths": bundle.bone_lengths.tolist() if bundle.bone_lengths is not None else None,
        "metadata": bundle.metadata,
    }


def bundle_from_dict(payload: dict) -> ClassifierBundle:
    if payload.get("format") != config.BUNDLE_FORMAT:
        raise DataError(f"not a '{config.BUNDLE_FORMAT}' file")
    if payload.get("version") != config.BUNDLE_VERSION:
        raise DataError(f"unsupported bundle version {payload.get('version')!r}")
    try:
        calibration = PairwiseCalibration(
            upper=np.array(payload["C"], dtype=np.float64),
            alpha=payload["alpha"],
            class_labels=tuple(payload["class_labels"]),
        )
        return ClassifierBundle(
            models=tuple(model_from_dict(m) for m in payload["models"]),
            calibration=calibration,
            norm_stats=NormStats.from_dict(payload["norm_stats"]) if payload.get("norm_stats") else None,
            preprocess=PreprocessConfig.from_dict(payload["preprocess"]) if payload.get("preprocess") else None,
            bone_lengths=np.array(payload["bone_lengths"]) if payload.get("bone_lengths") is not None else None,
            scoring=payload.get("scoring", config.DEFAULT_SCORING),
            metadata=payload.get("metadata", {}),
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"malformed bundle: {e}")


def bundle_text(bundle: ClassifierBundle) -> str:
    return to_json(bundle_to_dict(bundle))


def save_bundle(path: str, bundle: ClassifierBundle) -> str:
    return save_text_file(path, bundle_text(bundle))


def load_bundle(path: str) -> ClassifierBundle:
    try:
        return bundle_from_dict(load_json_file(path))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e.msg})")
    except DataError as e:
        raise DataError(f"{path}: {e}")


# --- CSV reports ---

def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def write_predictions_csv(path: str, ids: Sequence[str], predicted: Sequence[str], scores: np.ndarray, class_labels: Sequence[str]) -> str:
    header = ["id", "predicted"] + [f"score_{label}" for label in class_labels]
    rows = [[sample_id, label, *[repr(float(s)) for s in row]] for sample_id, label, row in zip(ids, predicted, scores)]
    return save_text_file(path, csv_text(header, rows))


def write_confusion_csv(path: str, report: EvaluationReport) -> str:
    header = ["true\\predicted"] + list(report.class_labels)
    rows = [[label, *[repr(float(v)) for v in row]] for label, row in zip(report.class_labels, report.confusion_percent)]
    return save_text_file(path, csv_text(header, rows))


def write_curve_csv(path: str, rows: Sequence[dict]) -> str:
    header = ["mode", "fraction", "mean_accuracy", "std_accuracy", "n_seeds"]
    body = [[r["mode"], repr(r["fraction"]), repr(r["mean_accuracy"]), repr(r["std_accuracy"]), r["n_seeds"]] for r in rows]
    return save_text_file(path, csv_text(header, body))


def write_features_csv(path: str, ids: Sequence[str], labels: Sequence, features: Sequence[np.ndarray], class_labels: Sequence[str]) -> str:
    header = ["id", "label"]
    for label, block in zip(class_labels, features):
        header += [f"{label}:h{j}" for j in range(block.shape[1])]
    rows = []
    for n, (sample_id, label) in enumerate(zip(ids, labels)):
        values = [repr(float(v)) for block in features for v in block[n]]
        rows.append([sample_id, "" if label is None else label, *values])
    return save_text_file(path, csv_text(header, rows))
