"""
Exact computations for tiny models by enumerating all 2^n_h hidden
configurations. Given h, each time slice is Gaussian with precision
P = I - U and mean m_i(h) = P^-1 (a_i + W_i h), so the visible integral is
closed-form. Used as ground truth for the approximate components and to
generate synthetic data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.special import expit, logsumexp, softmax

from . import config
from .core import (
    LrbmModel,
    SequenceSample,
    _frames_of,
    hidden_preactivation_batch,
    stack_frames,
    unnormalized_loglik,
    unnormalized_loglik_batch,
)
from .errors import ContractError, NumericalError
from .train import GradientAccumulator, stabilize_U, symmetric_offdiagonal
from .utils import derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleLimits:
    max_n_h: int = config.ORACLE_MAX_N_H
    max_d: int = config.ORACLE_MAX_D
    max_n_t: int = config.ORACLE_MAX_N_T

    def check(self, model: LrbmModel) -> None:
        if model.n_h > self.max_n_h or model.d > self.max_d or model.n_t > self.max_n_t:
            raise ContractError(
                f"model (d={model.d}, n_t={model.n_t}, n_h={model.n_h}) exceeds oracle limits "
                f"(d<={self.max_d}, n_t<={self.max_n_t}, n_h<={self.max_n_h})"
            )


@dataclass(frozen=True)
class _Enumeration:
    hidden: np.ndarray       # (K, n_h) every binary configuration
    means: np.ndarray        # (K, d, n_t) m_i(h) per configuration
    log_weights: np.ndarray  # (K,) unnormalized log marginal of h
    log_z: float
    chol: np.ndarray         # lower Cholesky factor of I - U
    covariance: np.ndarray   # (I - U)^-1


def enumerate_hidden(n_h: int) -> np.ndarray:
    """All 2^n_h binary vectors, one per row."""
    codes = np.arange(2 ** n_h)[:, None]
    return ((codes >> np.arange(n_h)[None, :]) & 1).astype(np.float64)


def _enumerate(model: LrbmModel, limits: Optional[OracleLimits] = None) -> _Enumeration:
    (limits or OracleLimits()).check(model)
    d, n_t = model.d, model.n_t
    precision = np.eye(d) - model.U
    try:
        chol = cholesky(precision, lower=True)
    except LinAlgError:
        raise NumericalError("I - U is not positive definite; the model is not normalizable")

    hidden = enumerate_hidden(model.n_h)
    drive = model.a[None] + np.einsum("thd,kh->kdt", model.W, hidden)
    k = hidden.shape[0]
    flat = drive.transpose(1, 0, 2).reshape(d, k * n_t)
    means = cho_solve((chol, True), flat).reshape(d, k, n_t).transpose(1, 0, 2)

    log_weights = hidden @ model.b + 0.5 * np.sum(drive * means, axis=(1, 2)) - 0.5 * np.sum(model.a * model.a)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    log_z = float(logsumexp(log_weights) + n_t * (d / 2.0) * np.log(2.0 * np.pi) - (n_t / 2.0) * log_det)
    covariance = cho_solve((chol, True), np.eye(d))
    return _Enumeration(hidden, means, log_weights, log_z, chol, covariance)


def exact_log_partition(model: LrbmModel, limits: Optional[OracleLimits] = None) -> float:
    return _enumerate(model, limits).log_z


def hidden_posterior_weights(model: LrbmModel, limits: Optional[OracleLimits] = None) -> np.ndarray:
    """Exact marginal p(h) over the rows of enumerate_hidden(n_h)."""
    return softmax(_enumerate(model, limits).log_weights)


def exact_loglik(model: LrbmModel, V: SequenceSample, limits: Optional[OracleLimits] = None) -> float:
    return unnormalized_loglik(model, V) - exact_log_partition(model, limits)


def exact_loglik_batch(model: LrbmModel, samples: Sequence[SequenceSample], limits: Optional[OracleLimits] = None) -> np.ndarray:
    return unnormalized_loglik_batch(model, stack_frames(samples, model)) - exact_log_partition(model, limits)


def exact_gradient(model: LrbmModel, V: SequenceSample, limits: Optional[OracleLimits] = None) -> GradientAccumulator:
    """Exact gradient of log p(V) for W, b, U and a.

    The U entry (r, s) is the derivative with respect to the shared
    parameter u_rs = u_sr.
    """
    frames = _frames_of(model, V)
    enum = _enumerate(model, limits)
    posterior = expit(hidden_preactivation_batch(model, frames[None])[0])
    weights = softmax(enum.log_weights)

    data_W = np.einsum("h,dt->thd", posterior, frames)
    data_U = frames @ frames.T

    model_h = weights @ enum.hidden
    model_W = np.einsum("k,kh,kdt->thd", weights, enum.hidden, enum.means)
    model_U = model.n_t * enum.covariance + np.einsum("k,kdt,ket->de", weights, enum.means, enum.means)
    model_v = np.einsum("k,kdt->dt", weights, enum.means)

    return GradientAccumulator(
        dW=data_W - model_W,
        db=posterior - model_h,
        dU=symmetric_offdiagonal(data_U - model_U),
        da=frames - model_v,
    )


def exact_sample_many(model: LrbmModel, count: int, rng: np.random.Generator, limits: Optional[OracleLimits] = None) -> list[SequenceSample]:
    """Draws h from its exact marginal, then each slice from N(m_i(h), (I - U)^-1)."""
    enum = _enumerate(model, limits)
    weights = softmax(enum.log_weights)
    weights = weights / weights.sum()
    picks = rng.choice(weights.shape[0], size=count, p=weights)
    noise = rng.standard_normal((count, model.d, model.n_t))
    # L^-T z has covariance (L L^T)^-1
    flat = noise.transpose(1, 0, 2).reshape(model.d, count * model.n_t)
    correlated = solve_triangular(enum.chol.T, flat, lower=False).reshape(model.d, count, model.n_t).transpose(1, 0, 2)
    frames = enum.means[picks] + correlated
    return [SequenceSample(v) for v in frames]


def exact_sample(model: LrbmModel, rng: np.random.Generator, limits: Optional[OracleLimits] = None) -> SequenceSample:
    return exact_sample_many(model, 1, rng, limits)[0]


@dataclass(frozen=True)
class SyntheticDataset:
    samples: list
    models: list
    class_labels: list


def random_model(
    rng: np.random.Generator,
    d: int,
    n_t: int,
    n_h: int,
    separation: float = 1.0,
    interaction: Optional[float] = None,
) -> LrbmModel:
    """A random tiny LRBM.

    With ``interaction`` None, U is scaled with ``separation`` and capped at
    lambda_max 0.8; otherwise lambda_max(U) is planted exactly at ``interaction``.
    """
    a = separation * rng.normal(0.0, 1.0, size=(d, n_t))
    b = separation * rng.normal(0.0, 1.0, size=n_h)
    W = separation * rng.normal(0.0, 1.0, size=(n_t, n_h, d)) / np.sqrt(d * n_t)
    S = symmetric_offdiagonal(rng.normal(0.0, 1.0, size=(d, d)))
    if interaction is None:
        U = stabilize_U(0.25 * separation * S, 0.2)
    else:
        lam = float(np.linalg.eigvalsh(S)[-1]) if d > 1 else 0.0
        U = S * (interaction / lam) if lam > 0.0 else S
    return LrbmModel(a=a, b=b, W=W, U=U)


def make_synthetic_dataset(
    n_classes: int,
    per_class: int,
    separation: float,
    seed: int,
    d: int = 3,
    n_t: int = 4,
    n_h: int = 8,
    limits: Optional[OracleLimits] = None,
    interaction: Optional[float] = None,
) -> SyntheticDataset:
    """Samples ``per_class`` sequences from each of ``n_classes`` random tiny LRBMs."""
    if n_classes < 2:
        raise ContractError(f"need at least 2 classes, got {n_classes}")
    limits = limits or OracleLimits()
    labels = [f"class_{k}" for k in range(n_classes)]
    models, samples = [], []
    for k, label in enumerate(labels):
        rng = derive_rng(seed, k)
        model = random_model(rng, d, n_t, n_h, separation, interaction)
        limits.check(model)
        models.append(model)
        for i, sample in enumerate(exact_sample_many(model, per_class, rng, limits)):
            samples.append(SequenceSample(sample.frames, label=label, id=f"{label}-{i:05d}"))
    logger.info(f"generated {len(samples)} synthetic sequences over {n_classes} classes (seed {seed})")
    return SyntheticDataset(samples=samples, models=models, class_labels=labels)


def bayes_predict(models: Sequence[LrbmModel], samples: Sequence[SequenceSample]) -> np.ndarray:
    """Index of the model with the highest exact log-likelihood, per sample."""
    scores = np.stack([exact_loglik_batch(model, samples) for model in models], axis=1)
    return np.argmax(scores, axis=1)
