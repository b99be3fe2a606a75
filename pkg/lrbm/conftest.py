"""Shared fixtures: seeded generators and tiny random models."""

import numpy as np
import pytest

from lrbm.core import LrbmModel, SequenceSample
from lrbm.oracle import exact_loglik, random_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_model(seed: int, d: int = 3, n_t: int = 2, n_h: int = 4, scale: float = 0.5) -> LrbmModel:
    """Random tiny model with lambda_max(U) <= 0.8."""
    return random_model(np.random.default_rng(seed), d, n_t, n_h, separation=scale)


def random_sample(rng: np.random.Generator, d: int, n_t: int, label=None, sample_id=None) -> SequenceSample:
    return SequenceSample(rng.normal(size=(d, n_t)), label=label, id=sample_id)


@pytest.fixture
def tiny_model():
    return make_tiny_model(7)


def finite_difference_gradient(model: LrbmModel, V: SequenceSample, step: float = 1e-5) -> dict:
    """Central differences of the exact log-likelihood for W, b, U and a.

    Each U entry (r, s) is perturbed together with (s, r), matching the
    shared parameter u_rs.
    """
    def loglik_with(name: str, index: tuple, delta: float) -> float:
        value = getattr(model, name).copy()
        value[index] += delta
        if name == "U":
            value[index[::-1]] += delta
        return exact_loglik(model.with_params(**{name: value}), V)

    result = {}
    for name in ("W", "b", "U", "a"):
        shape = getattr(model, name).shape
        grad = np.zeros(shape)
        for index in np.ndindex(*shape):
            if name == "U" and index[0] >= index[1]:
                continue
            grad[index] = (loglik_with(name, index, step) - loglik_with(name, index, -step)) / (2.0 * step)
        if name == "U":
            grad = grad + grad.T
        result[name] = grad
    return result
