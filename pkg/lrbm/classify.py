"""
Multi-class prediction from N class models: relative log-partition
calibration, the soft pairwise classifiers, the preference relation and
label-ranking scores, plus the evaluation report.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from sklearn.metrics import confusion_matrix, f1_score, roc_auc_score

from . import config
from .core import LrbmModel, SequenceSample, stack_frames, unnormalized_loglik_batch
from .data import NormStats, PreprocessConfig
from .errors import ConfigError, ContractError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PairwiseCalibration:
    """Antisymmetric relative log-partitions c_ij = log Z_i - log Z_j and the sharpness alpha.

    Only the strict upper triangle is stored (row-major), so antisymmetry
    holds by construction.
    """

    upper: np.ndarray
    alpha: float
    class_labels: tuple

    def __post_init__(self):
        labels = tuple(str(label) for label in self.class_labels)
        n = len(labels)
        upper = np.array(self.upper, dtype=np.float64).reshape(-1)
        if upper.shape[0] != n * (n - 1) // 2:
            raise ContractError(f"{n} classes need {n * (n - 1) // 2} pairwise entries, got {upper.shape[0]}")
        if not config.ALPHA_GRID_MIN <= self.alpha <= config.ALPHA_GRID_MAX:
            raise ConfigError(f"alpha must lie in [{config.ALPHA_GRID_MIN}, {config.ALPHA_GRID_MAX}], got {self.alpha}")
        upper.setflags(write=False)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "class_labels", labels)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    @property
    def C(self) -> np.ndarray:
        n = self.n_classes
        matrix = np.zeros((n, n))
        rows, cols = np.triu_indices(n, k=1)
        matrix[rows, cols] = self.upper
        matrix[cols, rows] = -self.upper
        return matrix

    @classmethod
    def from_matrix(cls, C: np.ndarray, alpha: float, class_labels: Sequence[str]) -> "PairwiseCalibration":
        C = np.asarray(C, dtype=np.float64)
        return cls(upper=C[np.triu_indices(C.shape[0], k=1)], alpha=alpha, class_labels=tuple(class_labels))


@dataclass(frozen=True, eq=False)
class ClassifierBundle:
    """N class models, their calibration and the preprocessing that feeds them."""

    models: tuple
    calibration: PairwiseCalibration
    norm_stats: Optional[NormStats] = None
    preprocess: Optional[PreprocessConfig] = None
    bone_lengths: Optional[np.ndarray] = None
    scoring: str = config.DEFAULT_SCORING
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        models = tuple(self.models)
        object.__setattr__(self, "models", models)
        if len(models) < 2:
            raise ContractError(f"a classifier needs at least 2 class models, got {len(models)}")
        dims = {(m.d, m.n_t) for m in models}
        if len(dims) != 1:
            raise ContractError(f"class models disagree on (d, n_t): {sorted(dims)}")
        if self.calibration.n_classes != len(models):
            raise ContractError(f"calibration covers {self.calibration.n_classes} classes, bundle has {len(models)}")
        if self.scoring not in config.SCORING_MODES:
            raise ConfigError(f"unknown scoring mode {self.scoring!r}; expected one of {config.SCORING_MODES}")

    @property
    def class_labels(self) -> tuple:
        return self.calibration.class_labels

    @property
    def d(self) -> int:
        return self.models[0].d

    @property
    def n_t(self) -> int:
        return self.models[0].n_t


# --- likelihood matrix ---

def loglik_matrix(models: Sequence[LrbmModel], samples: Sequence[SequenceSample]) -> np.ndarray:
    """g(V | M_i) for every sample (rows) and model (columns)."""
    stack = stack_frames(samples, models[0])
    return np.stack([unnormalized_loglik_batch(model, stack) for model in models], axis=1)


# --- pairwise calibration ---

def _balanced_threshold(t_pos: np.ndarray, t_neg: np.ndarray) -> tuple[float, float, bool]:
    """Threshold c maximizing balanced accuracy of [t > c => positive].

    Candidates are midpoints of consecutive sorted t; ties go to the midpoint
    closest to the median of all t. Returns (c, balanced accuracy, degenerate).
    """
    t_all = np.sort(np.concatenate([t_pos, t_neg]))
    if t_all[0] == t_all[-1]:
        return float(t_all[0]), 0.5, True
    mids = np.unique(0.5 * (t_all[:-1] + t_all[1:]))
    pos_sorted, neg_sorted = np.sort(t_pos), np.sort(t_neg)
    tpr = (pos_sorted.shape[0] - np.searchsorted(pos_sorted, mids, side="right")) / pos_sorted.shape[0]
    tnr = np.searchsorted(neg_sorted, mids, side="right") / neg_sorted.shape[0]
    balanced = 0.5 * (tpr + tnr)
    best = balanced.max()
    tied = mids[balanced == best]
    median = np.median(t_all)
    c = tied[int(np.argmin(np.abs(tied - median)))]
    return float(c), float(best), False


def estimate_cij(
    model_i: LrbmModel,
    model_j: LrbmModel,
    samples_i: Sequence[SequenceSample],
    samples_j: Sequence[SequenceSample],
) -> float:
    """Discriminative estimate of log Z_i - log Z_j from labelled samples of both classes."""
    if not samples_i or not samples_j:
        raise ContractError("estimate_cij needs samples from both classes")
    g_i = loglik_matrix([model_i, model_j], samples_i)
    g_j = loglik_matrix([model_i, model_j], samples_j)
    c, balanced, degenerate = _balanced_threshold(g_i[:, 0] - g_i[:, 1], g_j[:, 0] - g_j[:, 1])
    if degenerate:
        logger.warning(f"all likelihood differences equal {c:.6g}; c_ij search is degenerate")
    return c


def _labels_to_indices(samples: Sequence[SequenceSample], class_labels: Sequence[str]) -> np.ndarray:
    lookup = {label: k for k, label in enumerate(class_labels)}
    indices = []
    for sample in samples:
        if sample.label not in lookup:
            raise DataError(f"sample {sample.id!r} has unknown label {sample.label!r}")
        indices.append(lookup[sample.label])
    return np.array(indices, dtype=int)


def alpha_grid() -> np.ndarray:
    grid = np.logspace(np.log10(config.ALPHA_GRID_MIN), np.log10(config.ALPHA_GRID_MAX), config.ALPHA_GRID_SIZE)
    return np.clip(grid, config.ALPHA_GRID_MIN, config.ALPHA_GRID_MAX)


def _fit_alpha_from_g(G: np.ndarray, truth: np.ndarray, C: np.ndarray, scoring: str) -> float:
    best_alpha, best_accuracy = None, -1.0
    for alpha in alpha_grid():
        predictions = np.argmax(scores_from_loglik(G, C, alpha, scoring), axis=1)
        accuracy = float(np.mean(predictions == truth))
        if accuracy > best_accuracy:
            best_alpha, best_accuracy = float(alpha), accuracy
    logger.info(f"alpha = {best_alpha:.4g} (calibration accuracy {best_accuracy:.3f})")
    return best_alpha


def fit_alpha(bundle: ClassifierBundle, calibration_samples: Sequence[SequenceSample]) -> float:
    """Grid-searches alpha over 30 log-spaced values in [0.01, 100]; ties go to the smaller alpha."""
    truth = _labels_to_indices(calibration_samples, bundle.class_labels)
    if np.unique(truth).shape[0] < 2:
        raise DataError("alpha calibration needs samples from at least 2 classes")
    G = loglik_matrix(bundle.models, calibration_samples)
    return _fit_alpha_from_g(G, truth, bundle.calibration.C, bundle.scoring)


def calibrate(
    models: Sequence[LrbmModel],
    samples_by_class: Sequence[Sequence[SequenceSample]],
    class_labels: Sequence[str],
    scoring: str = config.DEFAULT_SCORING,
) -> PairwiseCalibration:
    """Estimates every c_ij (i < j) and then alpha on the same labelled samples."""
    n = len(models)
    if len(samples_by_class) != n or len(class_labels) != n:
        raise ContractError("models, sample groups and labels must have the same length")
    if any(len(group) == 0 for group in samples_by_class):
        raise DataError("every class needs calibration samples")
    G_by_class = [loglik_matrix(models, group) for group in samples_by_class]

    upper = []
    for i, j in combinations(range(n), 2):
        t_i = G_by_class[i][:, i] - G_by_class[i][:, j]
        t_j = G_by_class[j][:, i] - G_by_class[j][:, j]
        c, balanced, degenerate = _balanced_threshold(t_i, t_j)
        if degenerate:
            logger.warning(f"pair ({class_labels[i]}, {class_labels[j]}): degenerate c_ij search")
        logger.info(f"c[{class_labels[i]}, {class_labels[j]}] = {c:.4f} (balanced accuracy {balanced:.3f})")
        upper.append(c)

    calibration = PairwiseCalibration(upper=np.array(upper), alpha=1.0, class_labels=tuple(class_labels))
    G = np.concatenate(G_by_class, axis=0)
    truth = np.concatenate([np.full(len(group), k) for k, group in enumerate(samples_by_class)])
    alpha = _fit_alpha_from_g(G, truth, calibration.C, scoring)
    return replace(calibration, alpha=alpha)


def transitivity_defects(calibration: PairwiseCalibration) -> list[dict]:
    """|c_ij - (c_ik + c_kj)| for every ordered triple with i < j and k outside {i, j}."""
    C = calibration.C
    labels = calibration.class_labels
    defects = []
    for i, j in combinations(range(calibration.n_classes), 2):
        for k in range(calibration.n_classes):
            if k in (i, j):
                continue
            defects.append({
                "i": labels[i],
                "k": labels[k],
                "j": labels[j],
                "defect": float(abs(C[i, j] - (C[i, k] + C[k, j]))),
            })
    return defects


# --- preference relation and scores ---

def preference_from_loglik(G: np.ndarray, C: np.ndarray, alpha: float, scoring: str = "soft") -> np.ndarray:
    """Preference matrices R for rows of g values; shape (..., N, N), zero diagonal."""
    G = np.asarray(G, dtype=np.float64)
    margin = G[..., :, None] - G[..., None, :] - C
    if scoring == "soft":
        F = expit(alpha * margin)
    elif scoring == "vote":
        F = np.where(margin > 0, 1.0, np.where(margin < 0, 0.0, 0.5))
    else:
        raise ConfigError(f"unknown scoring mode {scoring!r}")
    n = C.shape[0]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    # lower entries are 1 - F_ji so that R(i, j) + R(j, i) = 1 exactly
    R = np.where(upper, F, 1.0 - np.swapaxes(F, -1, -2))
    R[..., np.arange(n), np.arange(n)] = 0.0
    return R


def scores_from_loglik(G: np.ndarray, C: np.ndarray, alpha: float, scoring: str = "soft") -> np.ndarray:
    return preference_from_loglik(G, C, alpha, scoring).sum(axis=-1)


def _g_vector(bundle: ClassifierBundle, V: SequenceSample) -> np.ndarray:
    return loglik_matrix(bundle.models, [V])[0]


def soft_pairwise(bundle: ClassifierBundle, V: SequenceSample, i: int, j: int) -> float:
    n = len(bundle.models)
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise ContractError(f"invalid class pair ({i}, {j}) for {n} classes")
    g = _g_vector(bundle, V)
    return float(expit(bundle.calibration.alpha * (g[i] - g[j] - bundle.calibration.C[i, j])))


def preference_matrix(bundle: ClassifierBundle, V: SequenceSample) -> np.ndarray:
    return preference_from_loglik(_g_vector(bundle, V), bundle.calibration.C, bundle.calibration.alpha, bundle.scoring)


def score_and_predict(bundle: ClassifierBundle, V: SequenceSample) -> tuple[np.ndarray, str]:
    """Label-ranking scores S(i) and the top label; ties go to the lowest class index."""
    scores = preference_matrix(bundle, V).sum(axis=1)
    return scores, bundle.class_labels[int(np.argmax(scores))]


def scores_for_samples(bundle: ClassifierBundle, samples: Sequence[SequenceSample]) -> np.ndarray:
    """Scores of every sample, shape (n, N); the single path behind predict and evaluate."""
    G = loglik_matrix(bundle.models, samples)
    return scores_from_loglik(G, bundle.calibration.C, bundle.calibration.alpha, bundle.scoring)


# --- evaluation ---

@dataclass
class EvaluationReport:
    class_labels: list
    confusion_counts: np.ndarray
    confusion_percent: np.ndarray
    hit_rate: dict
    macro_accuracy: float
    accuracy: float
    auc: dict
    group_f1: dict
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "class_labels": list(self.class_labels),
            "confusion_counts": self.confusion_counts.astype(int).tolist(),
            "confusion_percent": self.confusion_percent.tolist(),
            "hit_rate": self.hit_rate,
            "macro_accuracy": self.macro_accuracy,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "group_f1": self.group_f1,
            "n_samples": self.n_samples,
        }


def report_from_scores(
    scores: np.ndarray,
    truth: np.ndarray,
    class_labels: Sequence[str],
    groups: Optional[dict] = None,
) -> EvaluationReport:
    n = len(class_labels)
    predictions = np.argmax(scores, axis=1)
    counts = confusion_matrix(truth, predictions, labels=list(range(n)))
    totals = counts.sum(axis=1, keepdims=True)
    percent = np.divide(100.0 * counts, totals, out=np.zeros(counts.shape), where=totals > 0)

    hit_rate, auc = {}, {}
    for k, label in enumerate(class_labels):
        if totals[k, 0] == 0:
            logger.warning(f"class {label!r} has no samples in this evaluation")
            hit_rate[label] = None
        else:
            hit_rate[label] = float(percent[k, k] / 100.0)
        positives = truth == k
        if positives.all() or not positives.any():
            auc[label] = None
        else:
            auc[label] = float(roc_auc_score(positives, scores[:, k]))

    present = [v for v in hit_rate.values() if v is not None]
    macro = float(np.mean(present)) if present else 0.0

    group_of = {label: (groups or {}).get(label, label) for label in class_labels}
    group_names = sorted(set(group_of.values()))
    true_groups = [group_of[class_labels[k]] for k in truth]
    pred_groups = [group_of[class_labels[k]] for k in predictions]
    f1 = f1_score(true_groups, pred_groups, labels=group_names, average=None, zero_division=0)

    return EvaluationReport(
        class_labels=list(class_labels),
        confusion_counts=counts,
        confusion_percent=percent,
        hit_rate=hit_rate,
        macro_accuracy=macro,
        accuracy=float(np.mean(predictions == truth)) if truth.size else 0.0,
        auc=auc,
        group_f1={name: float(value) for name, value in zip(group_names, f1)},
        n_samples=int(truth.size),
    )


def evaluate(
    bundle: ClassifierBundle,
    labeled_samples: Sequence[SequenceSample],
    groups: Optional[dict] = None,
) -> EvaluationReport:
    """Confusion matrix, hit rates, macro accuracy, one-vs-rest AUC and group F1."""
    if not labeled_samples:
        raise DataError("evaluation needs at least one labelled sample")
    truth = _labels_to_indices(labeled_samples, bundle.class_labels)
    scores = scores_for_samples(bundle, labeled_samples)
    return report_from_scores(scores, truth, bundle.class_labels, groups)
