"""
Model parameters and the deterministic building blocks of the LRBM:
energy, unnormalized log-likelihood g(V), hidden and visible conditionals
and mean-field reconstruction.

Shapes used throughout:
    V  (d, n_t)           one column per time slice
    a  (d, n_t)           visible biases, column i is a_i
    b  (n_h,)             hidden biases
    W  (n_t, n_h, d)      W[i, j] is the vector w_ij connecting v_i to h_j
    U  (d, d)             symmetric, zero diagonal, shared by all slices

Batched helpers take stacks of shape (n, d, n_t). The Gaussian visible
units have unit variance, so data must be normalized beforehand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SequenceSample:
    """A d x n_t matrix of motion data plus an optional label and id."""

    frames: np.ndarray
    label: Optional[str] = None
    id: Optional[str] = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ContractError(f"frames must be a non-empty d x n_t matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ContractError(f"sample {self.id!r} contains non-finite entries")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def d(self) -> int:
        return self.frames.shape[0]

    @property
    def n_t(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, eq=False)
class HiddenState:
    """Hidden layer values, either binary samples or activation probabilities."""

    values: np.ndarray
    binary: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if self.binary and not np.all((values == 0.0) | (values == 1.0)):
            raise ContractError("binary hidden state must contain only 0 and 1")
        if not self.binary and not np.all((values >= 0.0) & (values <= 1.0)):
            raise ContractError("hidden probabilities must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class LrbmModel:
    """All parameters of one class-conditional LRBM.

    The Gaussian standard deviation is fixed to 1 and not stored.
    """

    a: np.ndarray
    b: np.ndarray
    W: np.ndarray
    U: np.ndarray
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        W = np.array(self.W, dtype=np.float64)
        U = np.array(self.U, dtype=np.float64)
        if a.ndim != 2:
            raise ContractError(f"a must be d x n_t, got shape {a.shape}")
        d, n_t = a.shape
        if W.shape != (n_t, b.shape[0], d):
            raise ContractError(f"W must have shape {(n_t, b.shape[0], d)}, got {W.shape}")
        if U.shape != (d, d):
            raise ContractError(f"U must have shape {(d, d)}, got {U.shape}")
        if not np.array_equal(U, U.T):
            raise ContractError("U must be exactly symmetric")
        if np.any(np.diag(U) != 0.0):
            raise ContractError("U must have an exactly zero diagonal")
        for name, value in (("a", a), ("b", b), ("W", W), ("U", U)):
            if not np.all(np.isfinite(value)):
                raise NumericalError(f"parameter {name} contains non-finite values")
            value.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "U", U)

    @classmethod
    def zeros(cls, d: int, n_t: int, n_h: int) -> "LrbmModel":
        return cls(
            a=np.zeros((d, n_t)),
            b=np.zeros(n_h),
            W=np.zeros((n_t, n_h, d)),
            U=np.zeros((d, d)),
        )

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def n_t(self) -> int:
        return self.a.shape[1]

    @property
    def n_h(self) -> int:
        return self.b.shape[0]

    def with_params(self, **changes) -> "LrbmModel":
        return replace(self, **changes)


def interaction_spectrum(model: LrbmModel) -> float:
    """Largest eigenvalue of U; the model is normalizable iff it is below 1."""
    return float(np.linalg.eigvalsh(model.U)[-1])


def is_stable(model: LrbmModel, margin: float, tol: float = 1e-12) -> bool:
    return interaction_spectrum(model) <= 1.0 - margin + tol


# --- shape helpers ---

def _frames_of(model: LrbmModel, V) -> np.ndarray:
    frames = V.frames if isinstance(V, SequenceSample) else np.asarray(V, dtype=np.float64)
    if frames.shape != (model.d, model.n_t):
        raise ContractError(f"sample shape {frames.shape} does not match model {(model.d, model.n_t)}")
    return frames


def _hidden_of(model: LrbmModel, h) -> np.ndarray:
    values = h.values if isinstance(h, HiddenState) else np.asarray(h, dtype=np.float64)
    if values.shape != (model.n_h,):
        raise ContractError(f"hidden state length {values.shape} does not match n_h={model.n_h}")
    return values


def stack_frames(samples: Sequence[SequenceSample], model: Optional[LrbmModel] = None) -> np.ndarray:
    """Stacks samples into an (n, d, n_t) array, checking uniform dimensions."""
    if not samples:
        raise ContractError("cannot stack an empty sample list")
    shape = samples[0].frames.shape
    if model is not None and shape != (model.d, model.n_t):
        raise ContractError(f"sample shape {shape} does not match model {(model.d, model.n_t)}")
    for sample in samples:
        if sample.frames.shape != shape:
            raise ContractError(f"mixed sample shapes {shape} and {sample.frames.shape} (id={sample.id!r})")
    return np.stack([s.frames for s in samples])


def _check_stack(model: LrbmModel, stack: np.ndarray) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1:] != (model.d, model.n_t):
        raise ContractError(f"stack shape {stack.shape} does not match model {(model.d, model.n_t)}")
    return stack


# --- hidden layer ---

def hidden_preactivation_batch(model: LrbmModel, stack: np.ndarray) -> np.ndarray:
    """b_j + sum_i v_i . w_ij for every sample in the stack; shape (n, n_h)."""
    stack = _check_stack(model, stack)
    return model.b[None, :] + np.einsum("ndt,thd->nh", stack, model.W)


def hidden_activation(model: LrbmModel, V: SequenceSample) -> HiddenState:
    """P(h_j = 1 | V) for every hidden unit. U does not enter."""
    frames = _frames_of(model, V)
    return HiddenState(expit(hidden_preactivation_batch(model, frames[None])[0]), binary=False)


def hidden_features(model: LrbmModel, samples: Sequence[SequenceSample]) -> np.ndarray:
    """Posterior hidden probabilities of each sample, shape (n, n_h)."""
    return expit(hidden_preactivation_batch(model, stack_frames(samples, model)))


def sample_hidden(model: LrbmModel, V: SequenceSample, rng: np.random.Generator) -> HiddenState:
    probabilities = hidden_activation(model, V).values
    return HiddenState((rng.random(probabilities.shape) < probabilities).astype(np.float64), binary=True)


# --- energy and likelihood ---

def energy(model: LrbmModel, V: SequenceSample, h: HiddenState) -> float:
    """E(V, h) for a binary hidden configuration."""
    if isinstance(h, HiddenState) and not h.binary:
        raise ContractError("energy requires a binary hidden state")
    frames = _frames_of(model, V)
    hidden = _hidden_of(model, h)
    diff = frames - model.a
    coupling = np.einsum("dt,thd->h", frames, model.W)
    interaction = np.einsum("dt,de,et->", frames, model.U, frames)
    return float(0.5 * np.sum(diff * diff) - model.b @ hidden - coupling @ hidden - 0.5 * interaction)


def unnormalized_loglik_batch(model: LrbmModel, stack: np.ndarray) -> np.ndarray:
    """g(V) for each sample in an (n, d, n_t) stack."""
    stack = _check_stack(model, stack)
    diff = stack - model.a[None]
    quadratic = -0.5 * np.sum(diff * diff, axis=(1, 2))
    interaction = 0.5 * np.einsum("ndt,de,net->n", stack, model.U, stack)
    # log(1 + exp(x)) without overflow
    softplus = np.logaddexp(0.0, hidden_preactivation_batch(model, stack)).sum(axis=1)
    return quadratic + interaction + softplus


def unnormalized_loglik(model: LrbmModel, V: SequenceSample) -> float:
    """g(V) = log p(V) + log Z."""
    return float(unnormalized_loglik_batch(model, _frames_of(model, V)[None])[0])


# --- visible layer ---

def visible_conditional_mean(model: LrbmModel, h: HiddenState, i: int, s: int, current_v_i) -> float:
    """Mean of the unit-variance Gaussian p(v_i^(s) | other components of v_i, h)."""
    if not 0 <= i < model.n_t:
        raise ContractError(f"time-slice index {i} out of range [0, {model.n_t})")
    if not 0 <= s < model.d:
        raise ContractError(f"component index {s} out of range [0, {model.d})")
    hidden = _hidden_of(model, h)
    v_i = np.asarray(current_v_i, dtype=np.float64)
    if v_i.shape != (model.d,):
        raise ContractError(f"current_v_i must have length {model.d}")
    neighbours = np.delete(np.arange(model.d), s)
    return float(model.a[s, i] + hidden @ model.W[i, :, s] + v_i[neighbours] @ model.U[neighbours, s])


def mean_field_batch(
    model: LrbmModel,
    hidden: np.ndarray,
    init: np.ndarray,
    sweeps: int,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Gauss-Seidel sweeps over components for a stack of samples.

    Every time slice is updated independently; within a slice, component s
    is replaced by its conditional mean using the already-updated values of
    the other components. When ``rng`` is given, unit-variance noise is added
    to each update (Gibbs sampling instead of mean field).
    """
    if sweeps < 1:
        raise ContractError(f"sweeps must be >= 1, got {sweeps}")
    init = _check_stack(model, init)
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (init.shape[0], model.n_h):
        raise ContractError(f"hidden shape {hidden.shape} does not match ({init.shape[0]}, {model.n_h})")
    field_ = model.a[None] + np.einsum("thd,nh->ndt", model.W, hidden)
    V = init.copy()
    n = V.shape[0]
    for _ in range(sweeps):
        for s in range(model.d):
            # U[s, s] == 0, so the own component drops out of the sum
            V[:, s, :] = field_[:, s, :] + np.einsum("k,nkt->nt", model.U[:, s], V)
            if rng is not None:
                V[:, s, :] += rng.standard_normal((n, model.n_t))
    return V


def mean_field_reconstruct(
    model: LrbmModel,
    h: HiddenState,
    init_V: SequenceSample,
    sweeps: int,
    rng: Optional[np.random.Generator] = None,
) -> SequenceSample:
    frames = _frames_of(model, init_V)
    hidden = _hidden_of(model, h)
    V = mean_field_batch(model, hidden[None], frames[None], sweeps, rng)[0]
    if not np.all(np.isfinite(V)):
        raise NumericalError("mean-field reconstruction diverged")
    label = init_V.label if isinstance(init_V, SequenceSample) else None
    sample_id = init_V.id if isinstance(init_V, SequenceSample) else None
    return SequenceSample(V, label=label, id=sample_id)


def reconstruction_error(
    model: LrbmModel,
    samples: Sequence[SequenceSample],
    sweeps: int,
    rng: np.random.Generator,
) -> float:
    """Mean squared error between data and a one-step mean-field reconstruction."""
    stack = stack_frames(samples, model)
    probabilities = expit(hidden_preactivation_batch(model, stack))
    hidden = (rng.random(probabilities.shape) < probabilities).astype(np.float64)
    recon = mean_field_batch(model, hidden, stack, sweeps)
    return float(np.mean((stack - recon) ** 2))
