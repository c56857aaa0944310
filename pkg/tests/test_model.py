"""Model-core tests: parameter accounting, masks, and likelihood kernels."""

import math

import numpy as np
import pytest

from lcirt.model import (
    MISSING,
    ConfigurationError,
    Dataset,
    ItemDesign,
    ModelSpec,
    Parameters,
    all_patterns,
    build_parameters,
    class_weights,
    count_parameters,
    log_likelihood,
    manifest_logprob,
)

from conftest import oracle_loglik, oracle_weights, perturbed_params, random_instance


# ---------------------------------------------------------------------------
# spec and design validation


def test_spec_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        ModelSpec(0, 2, 2, 4, 1)
    with pytest.raises(ConfigurationError):
        ModelSpec(1, 0, 2, 4, 1)
    with pytest.raises(ConfigurationError):
        ModelSpec(1, 2, 2, 0, 1)
    with pytest.raises(ConfigurationError):
        ModelSpec(3, 2, 2, 2, 1)  # fewer items than dimensions
    with pytest.raises(ConfigurationError):
        ModelSpec(1, 2, 2, 4, 1, parametrization="3pl")
    with pytest.raises(ConfigurationError):
        ModelSpec(1, 2, 2, 4, 1, missingness="listwise")


def test_ignore_mode_coerces_single_propensity_class():
    spec = ModelSpec(1, 3, 4, 5, 2, missingness="ignore")
    assert spec.n_propensity_classes == 1
    assert not spec.models_missingness
    assert not spec.has_propensity_variation


def test_item_design_anchors_and_validation():
    design = ItemDesign([0, 0, 1, 0, 1])
    assert design.n_dims == 2
    assert design.anchor_items().tolist() == [0, 2]
    with pytest.raises(ConfigurationError):
        ItemDesign([0, 2, 2])  # dimension 1 unused
    with pytest.raises(ConfigurationError):
        ItemDesign([1, 2, 3])
    spec = ModelSpec(2, 2, 2, 5, 1)
    design.validate_against(spec)
    with pytest.raises(ConfigurationError):
        design.validate_against(ModelSpec(2, 2, 2, 6, 1))
    with pytest.raises(ConfigurationError):
        design.validate_against(ModelSpec(3, 2, 2, 5, 1))


def test_dataset_derives_indicators_and_validates():
    y = np.array([[1, 0, MISSING], [MISSING, 1, 1]])
    x = np.zeros((2, 1))
    data = Dataset(y, x)
    assert data.r.tolist() == [[1, 1, 0], [0, 1, 1]]
    assert data.n == 2 and data.n_items == 3 and data.n_covariates == 1
    with pytest.raises(ValueError):
        Dataset(np.array([[2, 0]]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        Dataset(y, np.full((2, 1), np.nan))
    with pytest.raises(ValueError):
        Dataset(y, np.zeros((3, 1)))


# ---------------------------------------------------------------------------
# parameter counting


def test_parameter_count_known_configurations():
    # 36 items over 3 dimensions, 3 covariates, 3 ability classes
    base = dict(n_dims=3, n_items=36, n_covariates=3)
    cases = [
        (ModelSpec(n_ability_classes=3, n_propensity_classes=3, **base), 200),
        (
            ModelSpec(
                n_ability_classes=3,
                n_propensity_classes=3,
                parametrization="rasch",
                **base,
            ),
            96,
        ),
        (
            ModelSpec(
                n_ability_classes=3,
                n_propensity_classes=3,
                missingness="propensity",
                **base,
            ),
            164,
        ),
        (ModelSpec(n_ability_classes=3, n_propensity_classes=1, **base), 155),
        (
            ModelSpec(
                n_ability_classes=3,
                n_propensity_classes=1,
                missingness="ignore",
                **base,
            ),
            83,
        ),
    ]
    for spec, expected in cases:
        assert count_parameters(spec) == expected


def test_parameter_count_matches_free_masks(rng):
    # the closed form and the mask bookkeeping must agree everywhere
    for _ in range(60):
        s = int(rng.integers(1, 4))
        m = int(rng.integers(s, s + 6))
        spec = ModelSpec(
            s,
            int(rng.integers(1, 5)),
            int(rng.integers(1, 5)),
            m,
            int(rng.integers(0, 4)),
            ("rasch", "2pl")[int(rng.integers(2))],
            ("ignore", "propensity", "full")[int(rng.integers(3))],
        )
        dims = np.concatenate([np.arange(s), rng.integers(0, s, size=m - s)])
        params = build_parameters(spec, ItemDesign(dims))
        assert count_parameters(spec) == params.n_free(), spec


def test_anchor_constraints_in_masks():
    spec = ModelSpec(2, 3, 3, 5, 1)
    design = ItemDesign([0, 0, 1, 0, 1])
    p = build_parameters(spec, design)
    # first item of each dimension pins the ability scale
    for j in design.anchor_items():
        assert p.items.alpha[j] == 1.0 and not p.items.free_alpha[j]
        assert p.items.beta[j] == 0.0 and not p.items.free_beta[j]
    # item 1 pins the propensity scale
    assert p.items.gamma2[0] == 1.0 and not p.items.free_gamma2[0]
    assert p.items.delta[0] == 0.0 and not p.items.free_delta[0]
    assert p.items.free_gamma1.all()

    rasch = build_parameters(ModelSpec(2, 3, 3, 5, 1, "rasch"), design)
    assert not rasch.items.free_alpha.any()
    assert not rasch.items.free_gamma1.any()
    assert not rasch.items.free_gamma2.any()
    assert (rasch.items.alpha == 1).all()
    assert (rasch.items.gamma1 == 1).all()
    assert (rasch.items.gamma2 == 1).all()

    noability = build_parameters(ModelSpec(2, 3, 3, 5, 1, "2pl", "propensity"), design)
    assert not noability.items.free_gamma1.any()
    assert (noability.items.gamma1 == 0).all()


def test_single_propensity_class_releases_delta_anchor():
    spec = ModelSpec(2, 3, 1, 5, 1, "2pl", "full")
    p = build_parameters(spec, ItemDesign([0, 0, 1, 0, 1]))
    assert p.items.free_delta.all()
    assert not p.items.free_gamma2.any()
    assert p.latent.v_support.tolist() == [0.0]
    assert not p.latent.free_v.any()


# ---------------------------------------------------------------------------
# free-vector plumbing


def test_free_vector_round_trip(rng):
    for _ in range(20):
        spec, design, _, params = random_instance(
            rng,
            m=int(rng.integers(2, 6)),
            k1=int(rng.integers(1, 4)),
            k2=int(rng.integers(1, 4)),
            missingness=("ignore", "propensity", "full")[int(rng.integers(3))],
        )
        vec = rng.standard_normal(params.n_free())
        q = params.with_free_vector(vec)
        assert np.array_equal(q.free_vector(), vec)
        # fixed entries must be untouched
        for fam in ("alpha", "beta", "gamma1", "gamma2", "delta"):
            fixed = ~getattr(q.items, "free_" + fam)
            assert np.array_equal(
                getattr(q.items, fam)[fixed], getattr(params.items, fam)[fixed]
            )


def test_table_entries_align_with_free_vector(rng):
    spec, design, _, params = random_instance(rng, m=4, k1=3, k2=2)
    vec = rng.standard_normal(params.n_free())
    params = params.with_free_vector(vec)
    table = params.table_entries()
    free_values = np.array([v for _, v, free in table if free])
    assert np.array_equal(free_values, params.free_vector())
    assert params.free_names() == [n for n, _, free in table if free]
    names = [n for n, _, _ in table]
    assert len(names) == len(set(names))


def test_table_entries_skip_absent_families():
    spec = ModelSpec(1, 2, 1, 3, 1, missingness="ignore")
    p = build_parameters(spec, ItemDesign([0, 0, 0]))
    names = [n for n, _, _ in p.table_entries()]
    assert not any(n.startswith(("gamma1", "gamma2", "delta", "v[", "psi")) for n in names)

    k2one = build_parameters(ModelSpec(1, 2, 1, 3, 1, "2pl", "full"), ItemDesign([0, 0, 0]))
    names = [n for n, _, _ in k2one.table_entries()]
    assert any(n.startswith("gamma1") for n in names)
    assert any(n.startswith("delta") for n in names)
    assert not any(n.startswith(("gamma2", "v[", "psi")) for n in names)


# ---------------------------------------------------------------------------
# likelihood kernels against scalar oracles


def test_class_weights_match_softmax_oracle(rng):
    for _ in range(20):
        k = int(rng.integers(1, 5))
        c = int(rng.integers(0, 3))
        coef = rng.standard_normal((k - 1, c + 1))
        x = rng.standard_normal((7, c))
        spec, design, _, params = random_instance(rng, k1=k, n_covariates=c, m=2, n_dims=1)
        params.latent.phi[...] = coef
        for i in range(x.shape[0]):
            w = class_weights(params.latent, x[i], "ability")
            expected = oracle_weights(coef, x[i])
            assert w == pytest.approx(expected, abs=1e-12)
            assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_log_likelihood_matches_enumeration_oracle(rng):
    for _ in range(25):
        spec, design, data, params = random_instance(
            rng,
            n=int(rng.integers(1, 15)),
            m=int(rng.integers(2, 5)),
            k1=int(rng.integers(1, 3)),
            k2=int(rng.integers(1, 3)),
            missingness=("ignore", "propensity", "full")[int(rng.integers(3))],
        )
        expected = oracle_loglik(params, design, data)
        assert log_likelihood(params, design, data) == pytest.approx(
            expected, abs=1e-10
        )


def test_manifest_probabilities_sum_to_one(rng):
    # summing the manifest distribution over every (y, r) pattern is a
    # strong end-to-end check of the component densities
    for missingness in ("full", "propensity"):
        spec, design, _, params = random_instance(
            rng, m=3, k1=2, k2=2, missingness=missingness
        )
        x = rng.standard_normal(spec.n_covariates)
        total = 0.0
        for y, r in all_patterns(3):
            total += math.exp(manifest_logprob(params, design, y, r, x))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_manifest_probabilities_sum_to_one_ignore(rng):
    spec, design, _, params = random_instance(rng, m=3, k1=3, missingness="ignore")
    x = rng.standard_normal(spec.n_covariates)
    total = 0.0
    for y, r in all_patterns(3):
        if (y == MISSING).any():
            continue  # without an indicator model only complete patterns exist
        total += math.exp(manifest_logprob(params, design, y, r, x))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_missing_cells_ignored_under_mar(rng):
    # under ignorable missingness a missing cell must not change the
    # contribution of the observed cells
    spec, design, _, params = random_instance(rng, m=3, k1=2, missingness="ignore")
    x = np.zeros((1, spec.n_covariates))
    dropped = Dataset(np.array([[1, MISSING, 1]], dtype=np.int8), x)
    ll_0 = log_likelihood(params, design, Dataset(np.array([[1, 0, 1]], dtype=np.int8), x))
    ll_1 = log_likelihood(params, design, Dataset(np.array([[1, 1, 1]], dtype=np.int8), x))
    ll_dropped = log_likelihood(params, design, dropped)
    assert ll_dropped == pytest.approx(
        math.log(math.exp(ll_0) + math.exp(ll_1)), abs=1e-10
    )


def test_log_likelihood_empty_dataset():
    spec = ModelSpec(1, 2, 2, 3, 1)
    design = ItemDesign([0, 0, 0])
    params = build_parameters(spec, design)
    data = Dataset(np.zeros((0, 3), dtype=np.int8), np.zeros((0, 1)))
    assert log_likelihood(params, design, data) == 0.0
