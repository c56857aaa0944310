"""Model types and probability kernels.

The model has two discrete latent variables per subject: an s-dimensional
ability vector with k1 support points (rows of ``u_support``) and a scalar
response propensity with k2 support points (``v_support``).  Class
membership probabilities follow multinomial-logit regressions on subject
covariates, with class 1 as the reference category.  Conditional on the
latent classes, item responses and response indicators are independent
Bernoulli variables with logistic links:

    P(Y_j = 1 | ability class h1)      = expit(alpha_j * u[h1, d_j] - beta_j)
    P(R_j = 1 | classes h1, h2)        = expit(gamma1_j * u[h1, d_j]
                                               + gamma2_j * v[h2] - delta_j)

where d_j is the ability dimension measured by item j.  A response value
is observed exactly when R_j = 1; the manifest distribution multiplies the
response-indicator factor over all items with the response factor over the
observed items only.  Under ``missingness="ignore"`` the indicator factor
is dropped and only observed responses contribute.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import expit, log_expit, logsumexp

# Third state of the response alphabet {0, 1, MISSING}.
MISSING = -1

# Floor on per-item log-probabilities.  Unreachable for finite parameters
# below |logit| ~ 690; it only binds for degenerate fixed parametrizations
# and keeps the mixture normalization free of -inf - -inf.
LOG_FLOOR = math.log(1e-300)

Parametrization = Literal["rasch", "2pl"]
Missingness = Literal["ignore", "propensity", "full"]


class ConfigurationError(ValueError):
    """Raised for invalid model configurations."""


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and structural switches of one model.

    ``missingness`` selects how response indicators are treated:

    - ``"ignore"``: indicators carry no information; the propensity
      variable is dropped (``n_propensity_classes`` is coerced to 1).
    - ``"propensity"``: indicators depend on the propensity class only
      (all ability-to-missingness slopes fixed at 0).
    - ``"full"``: indicators depend on both latent variables.
    """

    n_dims: int
    n_ability_classes: int
    n_propensity_classes: int
    n_items: int
    n_covariates: int
    parametrization: Parametrization = "2pl"
    missingness: Missingness = "full"

    def __post_init__(self):
        if self.parametrization not in ("rasch", "2pl"):
            raise ConfigurationError(
                f"unknown parametrization {self.parametrization!r}"
            )
        if self.missingness not in ("ignore", "propensity", "full"):
            raise ConfigurationError(f"unknown missingness mode {self.missingness!r}")
        if self.n_dims < 1:
            raise ConfigurationError("n_dims must be >= 1")
        if self.n_ability_classes < 1:
            raise ConfigurationError("n_ability_classes must be >= 1")
        if self.n_propensity_classes < 1:
            raise ConfigurationError("n_propensity_classes must be >= 1")
        if self.n_items < self.n_dims:
            raise ConfigurationError("need at least one item per dimension")
        if self.n_covariates < 0:
            raise ConfigurationError("n_covariates must be >= 0")
        if self.missingness == "ignore" and self.n_propensity_classes != 1:
            object.__setattr__(self, "n_propensity_classes", 1)

    @property
    def is_2pl(self) -> bool:
        return self.parametrization == "2pl"

    @property
    def models_missingness(self) -> bool:
        return self.missingness != "ignore"

    @property
    def has_propensity_variation(self) -> bool:
        # propensity terms gamma2 * v exist only with at least two classes
        return self.models_missingness and self.n_propensity_classes > 1


@dataclass(frozen=True)
class ItemDesign:
    """Assignment of items to ability dimensions.

    ``dimension_of[j]`` is the dimension measured by item j.  Labels must
    be 0..n_dims-1 with every dimension used at least once.  The first item
    of each dimension (in item order) serves as that dimension's anchor.
    """

    dimension_of: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.dimension_of, dtype=int)
        if arr.ndim != 1 or arr.size == 0:
            raise ConfigurationError("dimension_of must be a non-empty 1-d array")
        labels = np.unique(arr)
        if labels[0] != 0 or labels[-1] != labels.size - 1:
            raise ConfigurationError(
                "dimension labels must be contiguous integers starting at 0"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "dimension_of", arr)

    @property
    def n_items(self) -> int:
        return self.dimension_of.size

    @property
    def n_dims(self) -> int:
        return int(self.dimension_of.max()) + 1

    def anchor_items(self) -> np.ndarray:
        """Index of the first item of each dimension."""
        return np.array(
            [np.flatnonzero(self.dimension_of == d)[0] for d in range(self.n_dims)]
        )

    def validate_against(self, spec: ModelSpec) -> None:
        if self.n_items != spec.n_items:
            raise ConfigurationError(
                f"design has {self.n_items} items, spec expects {spec.n_items}"
            )
        if self.n_dims != spec.n_dims:
            raise ConfigurationError(
                f"design has {self.n_dims} dimensions, spec expects {spec.n_dims}"
            )


@dataclass(frozen=True)
class Dataset:
    """Item responses and covariates for n subjects.

    ``y`` is (n, m) integer with entries in {0, 1, MISSING}; ``x`` is
    (n, c) float.  The response-indicator matrix ``r`` is derived, so the
    invariant r[i, j] = 0 iff y[i, j] = MISSING holds by construction.
    """

    y: np.ndarray
    x: np.ndarray
    r: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 2:
            raise ValueError("y must be 2-dimensional")
        if not np.isin(y, (0, 1, MISSING)).all():
            raise ValueError(f"y entries must be 0, 1 or {MISSING}")
        y = y.astype(np.int8)
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError("x must be (n, c) with the same n as y")
        if not np.isfinite(x).all():
            raise ValueError("covariates must be finite")
        r = (y != MISSING).astype(np.int8)
        for name, arr in (("y", y), ("x", x), ("r", r)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_items(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.y[idx], self.x[idx])

    def float_views(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(y == 1, y == 0, r) as float arrays, computed once and cached."""
        cached = self.__dict__.get("_float_views")
        if cached is None:
            cached = (
                (self.y == 1).astype(float),
                (self.y == 0).astype(float),
                self.r.astype(float),
            )
            object.__setattr__(self, "_float_views", cached)
        return cached


@dataclass
class ItemParams:
    """Per-item parameters with their free/fixed masks.

    ``alpha``/``beta`` parametrize the response probabilities, ``gamma1``/
    ``gamma2``/``delta`` the response-indicator probabilities.  Fixed
    entries (mask False) hold their constrained values exactly and are
    never touched by estimation.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    delta: np.ndarray
    free_alpha: np.ndarray
    free_beta: np.ndarray
    free_gamma1: np.ndarray
    free_gamma2: np.ndarray
    free_delta: np.ndarray

    FAMILIES = ("alpha", "beta", "gamma1", "gamma2", "delta")

    def __post_init__(self):
        m = np.asarray(self.alpha, dtype=float).size
        for name in self.FAMILIES:
            val = np.asarray(getattr(self, name), dtype=float)
            msk = np.asarray(getattr(self, "free_" + name), dtype=bool)
            if val.shape != (m,) or msk.shape != (m,):
                raise ConfigurationError("item parameter arrays must share shape (m,)")
            setattr(self, name, val)
            setattr(self, "free_" + name, msk)

    @property
    def n_items(self) -> int:
        return self.alpha.size

    def copy(self) -> "ItemParams":
        return ItemParams(
            *(getattr(self, f).copy() for f in self.FAMILIES),
            *(getattr(self, "free_" + f).copy() for f in self.FAMILIES),
        )

    def n_free(self) -> int:
        return int(sum(getattr(self, "free_" + f).sum() for f in self.FAMILIES))


@dataclass
class LatentStructure:
    """Support points and class-weight regression coefficients.

    ``u_support`` is (k1, s): row h1 holds the ability vector of class h1.
    ``v_support`` is (k2,).  ``phi`` is (k1-1, c+1) and ``psi`` (k2-1, c+1);
    column 0 is the intercept and class 1 is the reference with logit 0.
    All support values of u and all regression coefficients are free;
    ``free_v`` marks the free entries of ``v_support``.
    """

    u_support: np.ndarray
    v_support: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    free_v: np.ndarray

    def __post_init__(self):
        self.u_support = np.asarray(self.u_support, dtype=float)
        self.v_support = np.asarray(self.v_support, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        self.free_v = np.asarray(self.free_v, dtype=bool)
        if self.u_support.ndim != 2:
            raise ConfigurationError("u_support must be (k1, s)")
        k1 = self.u_support.shape[0]
        k2 = self.v_support.size
        if self.free_v.shape != (k2,):
            raise ConfigurationError("free_v must match v_support")
        if self.phi.shape[0] != k1 - 1:
            raise ConfigurationError("phi must have k1 - 1 rows")
        if self.psi.shape[0] != k2 - 1:
            raise ConfigurationError("psi must have k2 - 1 rows")
        if self.phi.shape[0] and self.psi.shape[0]:
            if self.phi.shape[1] != self.psi.shape[1]:
                raise ConfigurationError("phi and psi must share their column count")

    @property
    def n_ability_classes(self) -> int:
        return self.u_support.shape[0]

    @property
    def n_propensity_classes(self) -> int:
        return self.v_support.size

    @property
    def n_dims(self) -> int:
        return self.u_support.shape[1]

    def copy(self) -> "LatentStructure":
        return LatentStructure(
            self.u_support.copy(),
            self.v_support.copy(),
            self.phi.copy(),
            self.psi.copy(),
            self.free_v.copy(),
        )

    def n_free(self) -> int:
        return int(
            self.u_support.size + self.free_v.sum() + self.phi.size + self.psi.size
        )


@dataclass
class Parameters:
    """Complete parameter point of one model."""

    spec: ModelSpec
    items: ItemParams
    latent: LatentStructure

    def copy(self) -> "Parameters":
        return Parameters(self.spec, self.items.copy(), self.latent.copy())

    def n_free(self) -> int:
        return self.items.n_free() + self.latent.n_free()

    def free_vector(self) -> np.ndarray:
        """Free entries in canonical order.

        Order: item families (alpha, beta, gamma1, gamma2, delta), then
        u_support row-major, free v entries, phi row-major, psi row-major.
        """
        parts = [
            getattr(self.items, f)[getattr(self.items, "free_" + f)]
            for f in ItemParams.FAMILIES
        ]
        lat = self.latent
        parts += [
            lat.u_support.ravel(),
            lat.v_support[lat.free_v],
            lat.phi.ravel(),
            lat.psi.ravel(),
        ]
        return np.concatenate(parts)

    def with_free_vector(self, vec: np.ndarray) -> "Parameters":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_free(),):
            raise ValueError(f"expected a vector of length {self.n_free()}")
        out = self.copy()
        pos = 0
        for f in ItemParams.FAMILIES:
            msk = getattr(out.items, "free_" + f)
            k = int(msk.sum())
            getattr(out.items, f)[msk] = vec[pos : pos + k]
            pos += k
        lat = out.latent
        k = lat.u_support.size
        lat.u_support[...] = vec[pos : pos + k].reshape(lat.u_support.shape)
        pos += k
        k = int(lat.free_v.sum())
        lat.v_support[lat.free_v] = vec[pos : pos + k]
        pos += k
        k = lat.phi.size
        lat.phi[...] = vec[pos : pos + k].reshape(lat.phi.shape)
        pos += k
        lat.psi[...] = vec[pos:].reshape(lat.psi.shape)
        return out

    def free_names(self) -> list[str]:
        """Names of the free entries, parallel to ``free_vector``."""
        return [name for name, _, free in self.table_entries() if free]

    def table_entries(self) -> list[tuple[str, float, bool]]:
        """(name, value, free) for every parameter the model contains.

        Families absent from the model (indicator parameters under
        ``missingness="ignore"``, propensity terms with a single
        propensity class) are skipped.  Item and class indices in names
        are 1-based; the regression column index 0 is the intercept.
        """
        spec, items, lat = self.spec, self.items, self.latent
        rows: list[tuple[str, float, bool]] = []

        def item_family(name: str) -> None:
            vals = getattr(items, name)
            free = getattr(items, "free_" + name)
            rows.extend(
                (f"{name}[{j + 1}]", float(vals[j]), bool(free[j]))
                for j in range(items.n_items)
            )

        item_family("alpha")
        item_family("beta")
        if spec.models_missingness:
            item_family("gamma1")
            if spec.has_propensity_variation:
                item_family("gamma2")
            item_family("delta")
        for h1 in range(lat.n_ability_classes):
            for d in range(lat.n_dims):
                rows.append(
                    (f"u[{d + 1},{h1 + 1}]", float(lat.u_support[h1, d]), True)
                )
        if spec.has_propensity_variation:
            rows.extend(
                (f"v[{h2 + 1}]", float(lat.v_support[h2]), bool(lat.free_v[h2]))
                for h2 in range(lat.n_propensity_classes)
            )
        for h in range(lat.phi.shape[0]):
            for t in range(lat.phi.shape[1]):
                rows.append((f"phi[{h + 2},{t}]", float(lat.phi[h, t]), True))
        for h in range(lat.psi.shape[0]):
            for t in range(lat.psi.shape[1]):
                rows.append((f"psi[{h + 2},{t}]", float(lat.psi[h, t]), True))
        return rows

    # The free part of table_entries must agree with free_vector; order of
    # u entries differs (table is class-major like free_vector), so assert
    # by name lookup in tests rather than here.


def build_parameters(spec: ModelSpec, design: ItemDesign) -> Parameters:
    """Neutral parameter point with the identification masks of ``spec``.

    Anchoring: per dimension the first item has alpha fixed at 1 and beta
    fixed at 0; when the propensity variable is present, item 1 has gamma2
    fixed at 1 and delta fixed at 0.  Under ``rasch`` every discrimination
    is fixed at 1; under ``"propensity"`` all gamma1 are fixed at 0.  With
    a single propensity class the gamma2 terms drop (fixed at 0), v is the
    single fixed point 0, and every delta is free.
    """
    design.validate_against(spec)
    m, s, c = spec.n_items, spec.n_dims, spec.n_covariates
    k1, k2 = spec.n_ability_classes, spec.n_propensity_classes
    anchors = design.anchor_items()

    alpha = np.ones(m)
    free_alpha = np.zeros(m, dtype=bool)
    if spec.is_2pl:
        free_alpha[:] = True
        free_alpha[anchors] = False
    beta = np.zeros(m)
    free_beta = np.ones(m, dtype=bool)
    free_beta[anchors] = False

    gamma1 = np.zeros(m)
    gamma2 = np.zeros(m)
    delta = np.zeros(m)
    free_gamma1 = np.zeros(m, dtype=bool)
    free_gamma2 = np.zeros(m, dtype=bool)
    free_delta = np.zeros(m, dtype=bool)
    v = np.zeros(k2)
    free_v = np.zeros(k2, dtype=bool)

    if spec.models_missingness:
        free_delta[:] = True
        if spec.missingness == "full":
            gamma1[:] = 1.0
            if spec.is_2pl:
                free_gamma1[:] = True
        if k2 > 1:
            gamma2[:] = 1.0
            if spec.is_2pl:
                free_gamma2[:] = True
                free_gamma2[0] = False
            # anchoring delta of item 1 locates the propensity scale
            free_delta[0] = False
            free_v[:] = True

    items = ItemParams(
        alpha, beta, gamma1, gamma2, delta,
        free_alpha, free_beta, free_gamma1, free_gamma2, free_delta,
    )
    latent = LatentStructure(
        u_support=np.zeros((k1, s)),
        v_support=v,
        phi=np.zeros((k1 - 1, c + 1)),
        psi=np.zeros((max(k2 - 1, 0), c + 1)),
        free_v=free_v,
    )
    return Parameters(spec, items, latent)


def count_parameters(spec: ModelSpec) -> int:
    """Number of free parameters implied by ``spec``.

    Closed form; always equals the number of free mask entries of
    ``build_parameters`` (cross-checked by ``fit`` and the tests).
    """
    m, s, c = spec.n_items, spec.n_dims, spec.n_covariates
    k1, k2 = spec.n_ability_classes, spec.n_propensity_classes
    a = 1 if spec.is_2pl else 0
    if not spec.models_missingness:
        return (k1 - 1) * (c + 1) + s * k1 + (m - s) + a * (m - s)
    npar = (
        (k1 + k2 - 2) * (c + 1)
        + s * k1
        + k2
        + 2 * m
        - (s + 1)
        + a * (3 * m - (s + 1))
    )
    if spec.missingness == "propensity" and a:
        npar -= m
    if k2 == 1:
        # gamma2 terms drop; the released delta anchor offsets the lost v
        npar -= a * (m - 1)
    return npar


# ---------------------------------------------------------------------------
# probability kernels


def class_weights(
    latent: LatentStructure,
    x: np.ndarray,
    which: Literal["ability", "propensity"] = "ability",
) -> np.ndarray:
    """Class membership probabilities at one covariate vector."""
    coef = latent.phi if which == "ability" else latent.psi
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be a single covariate vector")
    return np.exp(_log_weights(coef, x[None, :]))[0]


def _log_weights(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Log multinomial-logit weights, (n, k); class 1 is the reference."""
    n = x.shape[0]
    k = coef.shape[0] + 1
    logits = np.zeros((n, k))
    if coef.shape[0]:
        if coef.shape[1] != x.shape[1] + 1:
            raise ValueError(
                f"coefficient matrix expects {coef.shape[1] - 1} covariates, "
                f"got {x.shape[1]}"
            )
        logits[:, 1:] = coef[:, 0] + x @ coef[:, 1:].T
    return logits - logsumexp(logits, axis=1, keepdims=True)


def response_logprob_tables(
    items: ItemParams, design: ItemDesign, u_support: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """log P(Y_j = 1) and log P(Y_j = 0) per ability class, each (k1, m)."""
    t = u_support[:, design.dimension_of]
    z = items.alpha * t - items.beta
    return (
        np.maximum(log_expit(z), LOG_FLOOR),
        np.maximum(log_expit(-z), LOG_FLOOR),
    )


def answer_logprob_tables(
    items: ItemParams,
    design: ItemDesign,
    u_support: np.ndarray,
    v_support: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """log P(R_j = 1) and log P(R_j = 0) per class pair, each (k1, k2, m)."""
    t = u_support[:, design.dimension_of]
    z = (
        items.gamma1 * t[:, None, :]
        + items.gamma2 * v_support[None, :, None]
        - items.delta
    )
    return (
        np.maximum(log_expit(z), LOG_FLOOR),
        np.maximum(log_expit(-z), LOG_FLOOR),
    )


def response_prob(
    items: ItemParams, design: ItemDesign, u_row: np.ndarray, j: int
) -> float:
    """P(Y_j = 1) for a subject with ability vector ``u_row``."""
    u_row = np.asarray(u_row, dtype=float)
    d = design.dimension_of[j]
    return float(expit(items.alpha[j] * u_row[d] - items.beta[j]))

def answer_prob(
    items: ItemParams, design: ItemDesign, u_row: np.ndarray, v: float, j: int
) -> float:
    """P(R_j = 1) for a subject with ability ``u_row`` and propensity ``v``."""
    u_row = np.asarray(u_row, dtype=float)
    d = design.dimension_of[j]
    return float(
        expit(items.gamma1[j] * u_row[d] + items.gamma2[j] * v - items.delta[j])
    )


def joint_conditional_logprob(
    params: Parameters,
    design: ItemDesign,
    y_row: np.ndarray,
    r_row: np.ndarray,
    h1: int,
    h2: int,
) -> float:
    """log P(y, r | classes h1, h2) for one subject.

    Observed responses contribute their response factor; the indicator
    factor covers all items unless ``missingness="ignore"``.
    """
    y_row, r_row = _validate_pattern(params.spec, y_row, r_row)
    items, lat = params.items, params.latent
    logp1, logp0 = response_logprob_tables(items, design, lat.u_support)
    out = float(
        np.sum(np.where(y_row == 1, logp1[h1], 0.0))
        + np.sum(np.where(y_row == 0, logp0[h1], 0.0))
    )
    if params.spec.models_missingness:
        logq1, logq0 = answer_logprob_tables(items, design, lat.u_support, lat.v_support)
        out += float(np.sum(np.where(r_row == 1, logq1[h1, h2], logq0[h1, h2])))
    return out


def _validate_pattern(spec, y_row, r_row):
    y_row = np.asarray(y_row)
    r_row = np.asarray(r_row)
    if y_row.shape != (spec.n_items,) or r_row.shape != (spec.n_items,):
        raise ValueError("pattern length must equal the number of items")
    if not np.array_equal(r_row != 0, y_row != MISSING):
        raise ValueError("r must be 0 exactly where y is missing")
    return y_row, r_row


def component_logdensities(
    params: Parameters, design: ItemDesign, data: Dataset
) -> np.ndarray:
    """log [lambda_h1(x) pi_h2(x) P(y, r | h1, h2)] per subject, (n, k1, k2).

    Under ``missingness="ignore"`` the propensity axis has length 1 and
    the indicator factor is absent.
    """
    spec, items, lat = params.spec, params.items, params.latent
    y1, y0, rf = data.float_views()
    logp1, logp0 = response_logprob_tables(items, design, lat.u_support)
    a = y1 @ logp1.T + y0 @ logp0.T  # (n, k1)
    log_lam = _log_weights(lat.phi, data.x)
    if not spec.models_missingness:
        return (a + log_lam)[:, :, None]
    k1, k2 = spec.n_ability_classes, spec.n_propensity_classes
    logq1, logq0 = answer_logprob_tables(items, design, lat.u_support, lat.v_support)
    b = rf @ logq1.reshape(k1 * k2, -1).T + (1.0 - rf) @ logq0.reshape(k1 * k2, -1).T
    out = a[:, :, None] + b.reshape(-1, k1, k2)
    out += log_lam[:, :, None]
    out += _log_weights(lat.psi, data.x)[:, None, :]
    return out


def manifest_logprob(
    params: Parameters,
    design: ItemDesign,
    y_row: np.ndarray,
    r_row: np.ndarray,
    x_row: np.ndarray,
) -> float:
    """log P(y, r | x): the latent classes summed out in the log domain."""
    y_row, _ = _validate_pattern(params.spec, y_row, r_row)
    data = Dataset(y_row[None, :], np.asarray(x_row, dtype=float)[None, :])
    comp = component_logdensities(params, design, data)
    return float(logsumexp(comp.reshape(1, -1), axis=1)[0])


def log_likelihood(params: Parameters, design: ItemDesign, data: Dataset) -> float:
    """Sample log-likelihood; 0.0 on an empty dataset."""
    if data.n == 0:
        return 0.0
    comp = component_logdensities(params, design, data)
    return float(np.sum(logsumexp(comp.reshape(data.n, -1), axis=1)))


def all_patterns(n_items: int):
    """All (y, r) patterns over {0, 1, MISSING} items, for enumeration."""
    for combo in itertools.product((0, 1, MISSING), repeat=n_items):
        y = np.array(combo, dtype=np.int8)
        yield y, (y != MISSING).astype(np.int8)
