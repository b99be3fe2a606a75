"""
Per-class LRBM learning: contrastive divergence with mean-field
reconstruction, the stability constraint on U, and candidate selection by
the rank criterion.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit
from scipy.stats import rankdata

from . import config
from .core import (
    LrbmModel,
    SequenceSample,
    hidden_preactivation_batch,
    mean_field_batch,
    stack_frames,
    unnormalized_loglik_batch,
)
from .errors import ConfigError, ContractError, NumericalError
from .utils import config_hash, derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Learning hyperparameters for one class model."""

    epochs: int = config.DEFAULT_EPOCHS
    learning_rate: float = config.DEFAULT_LEARNING_RATE
    cd_steps: int = config.DEFAULT_CD_STEPS
    mf_sweeps: int = config.DEFAULT_MF_SWEEPS
    momentum: float = config.DEFAULT_MOMENTUM
    weight_decay: float = config.DEFAULT_WEIGHT_DECAY
    minibatch: int = config.DEFAULT_MINIBATCH
    candidates: int = config.DEFAULT_CANDIDATES
    stability_margin: float = config.DEFAULT_STABILITY_MARGIN
    seed: int = config.DEFAULT_SEED
    learn_visible_bias: bool = False
    n_hidden: int = config.DEFAULT_N_HIDDEN
    learn_interactions: bool = True
    stochastic_reconstruction: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.minibatch < 1:
            raise ConfigError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.cd_steps < 1 or self.mf_sweeps < 1 or self.candidates < 1:
            raise ConfigError("cd_steps, mf_sweeps and candidates must all be >= 1")
        if self.n_hidden < 0:
            raise ConfigError(f"n_hidden must be >= 0, got {self.n_hidden}")
        if not self.learning_rate >= 0.0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.stability_margin < 1.0:
            raise ConfigError(f"stability_margin must lie in (0, 1), got {self.stability_margin}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class GradientAccumulator:
    """Gradient (or momentum) buffers with the shapes of the model parameters."""

    dW: np.ndarray
    db: np.ndarray
    dU: np.ndarray
    da: np.ndarray

    @classmethod
    def zeros_like(cls, model: LrbmModel) -> "GradientAccumulator":
        return cls(
            dW=np.zeros_like(model.W),
            db=np.zeros_like(model.b),
            dU=np.zeros_like(model.U),
            da=np.zeros_like(model.a),
        )

    def flat(self) -> np.ndarray:
        """All buffers in one vector; dU contributes its strict upper triangle."""
        upper = self.dU[np.triu_indices(self.dU.shape[0], k=1)]
        return np.concatenate([self.dW.ravel(), self.db.ravel(), upper, self.da.ravel()])


def symmetric_offdiagonal(matrix: np.ndarray) -> np.ndarray:
    """Exactly symmetric copy of a square matrix with a zero diagonal."""
    result = 0.5 * (matrix + matrix.T)
    np.fill_diagonal(result, 0.0)
    return result


def _cd_statistics(
    model: LrbmModel,
    data: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> GradientAccumulator:
    n = data.shape[0]
    positive = expit(hidden_preactivation_batch(model, data))

    recon, negative = data, positive
    noise_rng = rng if cfg.stochastic_reconstruction else None
    for _ in range(cfg.cd_steps):
        hidden = (rng.random(negative.shape) < negative).astype(np.float64)
        recon = mean_field_batch(model, hidden, recon, cfg.mf_sweeps, noise_rng)
        negative = expit(hidden_preactivation_batch(model, recon))

    # Probabilities, not samples, feed both phases' statistics
    dW = (np.einsum("nh,ndt->thd", positive, data) - np.einsum("nh,ndt->thd", negative, recon)) / n
    db = (positive - negative).mean(axis=0)
    if cfg.learn_interactions:
        raw = (np.einsum("ndt,net->de", data, data) - np.einsum("ndt,net->de", recon, recon)) / n
        dU = symmetric_offdiagonal(raw)
    else:
        dU = np.zeros_like(model.U)
    if cfg.learn_visible_bias:
        da = (data - recon).mean(axis=0)
    else:
        da = np.zeros_like(model.a)
    return GradientAccumulator(dW=dW, db=db, dU=dU, da=da)


def cd_gradient(
    model: LrbmModel,
    batch: Sequence[SequenceSample],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> GradientAccumulator:
    """Contrastive-divergence estimate of the log-likelihood gradient over a batch."""
    if not batch:
        raise ContractError("cd_gradient needs a non-empty batch")
    return _cd_statistics(model, stack_frames(batch, model), cfg, rng)


def stabilize_U(U: np.ndarray, margin: float) -> np.ndarray:
    """Rescales U so that its largest eigenvalue is at most 1 - margin."""
    U = symmetric_offdiagonal(np.asarray(U, dtype=np.float64))
    if U.shape[0] < 2:
        return U
    lam = float(np.linalg.eigvalsh(U)[-1])
    bound = 1.0 - margin
    if lam > bound:
        U = U * (bound / lam)
    return U


def apply_update(
    model: LrbmModel,
    grads: GradientAccumulator,
    cfg: TrainConfig,
    velocity: Optional[GradientAccumulator] = None,
) -> LrbmModel:
    """One gradient-ascent step with optional momentum, decay and the U constraint.

    ``velocity`` is updated in place when given.
    """
    lr = cfg.learning_rate
    decay = cfg.weight_decay

    def step(theta: np.ndarray, grad: np.ndarray, name: str) -> np.ndarray:
        if grad.shape != theta.shape:
            raise ContractError(f"gradient {name} has shape {grad.shape}, expected {theta.shape}")
        if velocity is not None:
            smoothed = cfg.momentum * getattr(velocity, name) + grad
            setattr(velocity, name, smoothed)
        else:
            smoothed = grad
        return theta + lr * smoothed - lr * decay * theta

    W = step(model.W, grads.dW, "dW")
    b = step(model.b, grads.db, "db")
    U = step(model.U, grads.dU, "dU") if cfg.learn_interactions else model.U
    a = step(model.a, grads.da, "da") if cfg.learn_visible_bias else model.a

    for name, value in (("W", W), ("b", b), ("U", U), ("a", a)):
        if not np.all(np.isfinite(value)):
            raise NumericalError(
                f"non-finite {name} after update (learning_rate={lr}, max |grad|="
                f"{np.nanmax(np.abs(grads.flat())) if grads.flat().size else 0.0})"
            )
    U = stabilize_U(U, cfg.stability_margin)
    return replace(model, a=a, b=b, W=W, U=U)


def init_model(d: int, n_t: int, cfg: TrainConfig, rng: np.random.Generator) -> LrbmModel:
    """W ~ N(0, 0.01^2); biases and U start at zero."""
    model = LrbmModel.zeros(d, n_t, cfg.n_hidden)
    return replace(model, W=rng.normal(0.0, config.INIT_WEIGHT_STD, size=model.W.shape))


def train_class_model(
    samples: Sequence[SequenceSample],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> LrbmModel:
    """Trains one LRBM on the samples of a single class."""
    if not samples:
        raise ContractError("train_class_model needs at least one sample")
    data = stack_frames(samples)
    n, d, n_t = data.shape
    model = init_model(d, n_t, cfg, rng)
    velocity = GradientAccumulator.zeros_like(model)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            batch = data[order[start:start + cfg.minibatch]]
            grads = _cd_statistics(model, batch, cfg, rng)
            model = apply_update(model, grads, cfg, velocity)

        if epoch % config.LOG_EVERY_EPOCHS == 0 or epoch == cfg.epochs - 1:
            recon_error = float(np.mean((data - _deterministic_recon(model, data, cfg)) ** 2))
            if not np.isfinite(recon_error):
                raise NumericalError(f"reconstruction error became non-finite at epoch {epoch}")
            logger.debug(f"epoch {epoch + 1}/{cfg.epochs}: reconstruction mse {recon_error:.6f}")
    return model


def _deterministic_recon(model: LrbmModel, data: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    probabilities = expit(hidden_preactivation_batch(model, data))
    return mean_field_batch(model, probabilities, data, cfg.mf_sweeps)


def train_candidates(
    samples: Sequence[SequenceSample],
    cfg: TrainConfig,
    master_seed: int,
    class_index: int,
) -> list[LrbmModel]:
    """Trains ``cfg.candidates`` models from seeds derived from (master_seed, class_index)."""
    candidates = []
    for candidate in range(cfg.candidates):
        rng = derive_rng(master_seed, class_index, candidate)
        model = train_class_model(samples, cfg, rng)
        provenance = {
            "seed": int(master_seed),
            "class_index": int(class_index),
            "candidate": candidate,
            "epochs": cfg.epochs,
            "config_hash": cfg.hash(),
        }
        candidates.append(replace(model, provenance=provenance))
        logger.info(f"class {class_index}: trained candidate {candidate + 1}/{cfg.candidates}")
    return candidates


def rank_sum(
    model: LrbmModel,
    own_class_samples: Sequence[SequenceSample],
    other_class_samples: Sequence[SequenceSample],
) -> float:
    """Sum of the descending-g ranks (1 = highest) of the own-class instances."""
    own = unnormalized_loglik_batch(model, stack_frames(own_class_samples, model))
    other = unnormalized_loglik_batch(model, stack_frames(other_class_samples, model))
    ranks = rankdata(-np.concatenate([own, other]), method="average")
    return float(ranks[: own.shape[0]].sum())


def select_candidate(
    candidates: Sequence[LrbmModel],
    own_class_samples: Sequence[SequenceSample],
    other_class_samples: Sequence[SequenceSample],
) -> LrbmModel:
    """Returns the candidate whose own-class instances rank highest; ties go to the lowest index."""
    if not candidates:
        raise ContractError("select_candidate needs at least one candidate")
    if len(candidates) == 1:
        return candidates[0]
    sums = [rank_sum(model, own_class_samples, other_class_samples) for model in candidates]
    best = int(np.argmin(sums))
    logger.info(f"selected candidate {best} (rank sums: {', '.join(f'{s:.1f}' for s in sums)})")
    return candidates[best]


def train_classifier_models(
    train_by_class: Sequence[Sequence[SequenceSample]],
    validation_by_class: Sequence[Sequence[SequenceSample]],
    cfg: TrainConfig,
    master_seed: int,
    threads: int = 1,
) -> list[LrbmModel]:
    """Trains and selects one model per class, one worker per class.

    Seeds depend only on (master_seed, class index, candidate index), so the
    result does not depend on the number of threads.
    """
    if len(train_by_class) != len(validation_by_class):
        raise ContractError("train and validation splits must cover the same classes")

    def job(class_index: int) -> LrbmModel:
        candidates = train_candidates(train_by_class[class_index], cfg, master_seed, class_index)
        own = validation_by_class[class_index]
        other = [s for k, group in enumerate(validation_by_class) if k != class_index for s in group]
        return select_candidate(candidates, own, other)

    return Parallel(n_jobs=max(1, threads), prefer="threads")(delayed(job)(k) for k in range(len(train_by_class)))
