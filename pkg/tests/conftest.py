"""Shared fixtures and brute-force oracles.

The oracles recompute model quantities with plain Python loops and
``math`` scalar arithmetic, independent of the vectorized code under
test.
"""

import math

import numpy as np
import pytest

from lcirt.model import (
    MISSING,
    Dataset,
    ItemDesign,
    ModelSpec,
    Parameters,
    build_parameters,
)


def _sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def _softmax(logits: list[float]) -> list[float]:
    top = max(logits)
    exps = [math.exp(t - top) for t in logits]
    s = sum(exps)
    return [e / s for e in exps]


def oracle_weights(coef: np.ndarray, x_row: np.ndarray) -> list[float]:
    """Multinomial-logit class weights for one subject, class 1 reference."""
    logits = [0.0]
    for h in range(coef.shape[0]):
        logits.append(coef[h, 0] + sum(coef[h, 1 + t] * x_row[t] for t in range(len(x_row))))
    return _softmax(logits)


def oracle_loglik(params: Parameters, design: ItemDesign, data: Dataset) -> float:
    """Log-likelihood by full enumeration over class pairs, scalar arithmetic."""
    spec, items, lat = params.spec, params.items, params.latent
    dims = design.dimension_of
    total = 0.0
    for i in range(data.n):
        lam = oracle_weights(lat.phi, data.x[i])
        pi = oracle_weights(lat.psi, data.x[i]) if spec.models_missingness else [1.0]
        like = 0.0
        for h1 in range(spec.n_ability_classes):
            for h2 in range(len(pi)):
                w = lam[h1] * pi[h2]
                for j in range(data.n_items):
                    u = lat.u_support[h1, dims[j]]
                    yij = data.y[i, j]
                    if spec.models_missingness:
                        q = _sigmoid(
                            items.gamma1[j] * u
                            + items.gamma2[j] * lat.v_support[h2]
                            - items.delta[j]
                        )
                        if yij == MISSING:
                            w *= 1.0 - q
                            continue
                        w *= q
                    elif yij == MISSING:
                        # without an indicator model a missing cell drops out
                        continue
                    p = _sigmoid(items.alpha[j] * u - items.beta[j])
                    w *= p if yij == 1 else 1.0 - p
                like += w
        total += math.log(like)
    return total


def oracle_pattern_prob(
    params: Parameters, design: ItemDesign, y_row: np.ndarray, x_row: np.ndarray
) -> float:
    """Manifest probability of one response/missingness pattern."""
    data = Dataset(np.array([y_row]), np.array([x_row], dtype=float))
    return math.exp(oracle_loglik(params, design, data))


def random_instance(
    rng: np.random.Generator,
    n: int = 12,
    m: int = 3,
    k1: int = 2,
    k2: int = 2,
    n_dims: int | None = None,
    n_covariates: int = 1,
    parametrization: str = "2pl",
    missingness: str = "full",
    missing_rate: float = 0.3,
):
    """Random spec, design, dataset, and parameter point for property tests."""
    s = n_dims if n_dims is not None else min(2, m)
    spec = ModelSpec(s, k1, k2, m, n_covariates, parametrization, missingness)
    dims = np.concatenate([np.arange(s), rng.integers(0, s, size=m - s)])
    design = ItemDesign(dims)
    y = rng.integers(0, 2, size=(n, m)).astype(np.int8)
    if missingness != "ignore" and missing_rate > 0:
        gap = rng.random((n, m)) < missing_rate
        y[gap] = MISSING
    x = rng.standard_normal((n, n_covariates))
    data = Dataset(y, x)
    params = perturbed_params(rng, spec, design)
    return spec, design, data, params


def perturbed_params(
    rng: np.random.Generator, spec: ModelSpec, design: ItemDesign, scale: float = 1.0
) -> Parameters:
    """Anchored parameter skeleton with random values in the free slots."""
    params = build_parameters(spec, design)
    vec = rng.uniform(-scale, scale, size=params.n_free())
    return params.with_free_vector(vec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
