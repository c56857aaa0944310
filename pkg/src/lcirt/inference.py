"""Post-estimation tools.

Class alignment (latent classes are identified only up to relabeling),
standardization of the ability and propensity scales, nonparametric
bootstrap standard errors, and likelihood-based model comparison.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import chi2

from .em import EMConfig, EstimationWarning, FitResult, fit
from .model import (
    Dataset,
    ItemDesign,
    ItemParams,
    LatentStructure,
    ModelSpec,
    Parameters,
    _log_weights,
)


class StandardizationError(ValueError):
    """A latent dimension has zero variance under the average weights."""


class ComparisonError(RuntimeError):
    """Fits passed to a comparison are mutually inconsistent."""


# ---------------------------------------------------------------------------
# class alignment


def _best_permutation(ref: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Permutation p minimizing ||cand[p] - ref||^2, ties to the first.

    Exhaustive for up to 5 classes; beyond that fall back to matching
    sorted first coordinates, which is exact for well-separated classes.
    """
    k = ref.shape[0]
    if k == 1:
        return np.zeros(1, dtype=int)
    if k > 5:
        warnings.warn(
            f"{k} classes: aligning by sorted first support coordinate "
            "instead of exhaustive search",
            EstimationWarning,
        )
        perm = np.empty(k, dtype=int)
        perm[np.argsort(ref[:, 0], kind="stable")] = np.argsort(
            cand[:, 0], kind="stable"
        )
        return perm
    best_cost = np.inf
    best: tuple[int, ...] | None = None
    for p in itertools.permutations(range(k)):
        cost = float(((cand[list(p)] - ref) ** 2).sum())
        if cost < best_cost - 1e-15:
            best_cost, best = cost, p
    return np.array(best, dtype=int)


def _permute_logits(coef: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Re-express reference-class-1 logit coefficients after relabeling."""
    full = np.vstack([np.zeros((1, coef.shape[1])), coef])
    moved = full[perm]
    return moved[1:] - moved[0]


def permute_classes(
    params: Parameters, perm_ability: np.ndarray, perm_propensity: np.ndarray
) -> Parameters:
    """Relabel latent classes; the manifest distribution is unchanged."""
    out = params.copy()
    lat = out.latent
    lat.u_support[...] = params.latent.u_support[perm_ability]
    if lat.phi.shape[0]:
        lat.phi[...] = _permute_logits(params.latent.phi, perm_ability)
    lat.v_support[...] = params.latent.v_support[perm_propensity]
    lat.free_v[...] = params.latent.free_v[perm_propensity]
    if lat.psi.shape[0]:
        lat.psi[...] = _permute_logits(params.latent.psi, perm_propensity)
    return out


def align_classes(reference: Parameters, candidate: Parameters) -> Parameters:
    """Relabel ``candidate``'s classes to best match ``reference``.

    Ability and propensity permutations are chosen independently, each
    minimizing the summed squared distance between support points.
    """
    ref_lat, cand_lat = reference.latent, candidate.latent
    if ref_lat.u_support.shape != cand_lat.u_support.shape:
        raise ComparisonError("reference and candidate have different class counts")
    if ref_lat.v_support.shape != cand_lat.v_support.shape:
        raise ComparisonError("reference and candidate have different class counts")
    perm1 = _best_permutation(ref_lat.u_support, cand_lat.u_support)
    perm2 = _best_permutation(
        ref_lat.v_support[:, None], cand_lat.v_support[:, None]
    )
    return permute_classes(candidate, perm1, perm2)


# ---------------------------------------------------------------------------
# standardization


@dataclass
class StandardizedReport:
    """Parameters re-expressed on the standardized latent scales.

    The ability dimensions (and the propensity when present) are shifted
    and scaled to mean 0, variance 1 under the sample-average class
    weights; item parameters absorb the transform, so every manifest
    pattern probability is identical to the raw fit.
    """

    params_star: Parameters
    ability_mean: np.ndarray
    ability_scale: np.ndarray
    propensity_mean: float
    propensity_scale: float
    avg_ability_weights: np.ndarray
    avg_propensity_weights: np.ndarray
    ability_corr: np.ndarray

    def to_dict(self) -> dict:
        p = self.params_star
        return {
            "u_support": p.latent.u_support.tolist(),
            "v_support": p.latent.v_support.tolist(),
            "items": {
                f: getattr(p.items, f).tolist() for f in ItemParams.FAMILIES
            },
            "avg_ability_weights": self.avg_ability_weights.tolist(),
            "avg_propensity_weights": self.avg_propensity_weights.tolist(),
            "ability_corr": self.ability_corr.tolist(),
            "ability_mean": self.ability_mean.tolist(),
            "ability_scale": self.ability_scale.tolist(),
            "propensity_mean": self.propensity_mean,
            "propensity_scale": self.propensity_scale,
        }


def standardize_parameters(
    params: Parameters, design: ItemDesign, data: Dataset
) -> StandardizedReport:
    spec, lat = params.spec, params.latent
    lam_bar = np.exp(_log_weights(lat.phi, data.x)).mean(axis=0)
    u = lat.u_support
    mu = lam_bar @ u
    var = lam_bar @ (u - mu) ** 2
    bad = var <= 0
    if bad.any():
        raise StandardizationError(
            f"ability dimension(s) {np.flatnonzero(bad).tolist()} are degenerate "
            "under the average class weights"
        )
    sigma = np.sqrt(var)
    z = (u - mu) / sigma
    corr = (lam_bar[:, None] * z).T @ z

    pi_bar = np.exp(_log_weights(lat.psi, data.x)).mean(axis=0)
    if spec.has_propensity_variation:
        mu_v = float(pi_bar @ lat.v_support)
        var_v = float(pi_bar @ (lat.v_support - mu_v) ** 2)
        if var_v <= 0:
            raise StandardizationError(
                "the propensity variable is degenerate under the average weights"
            )
        sigma_v = float(np.sqrt(var_v))
    else:
        mu_v, sigma_v = 0.0, 1.0

    out = params.copy()
    out.latent.u_support[...] = z
    out.latent.v_support[...] = (lat.v_support - mu_v) / sigma_v
    # item parameters absorb the affine change of latent scale
    d = design.dimension_of
    items = out.items
    alpha_raw = params.items.alpha
    gamma1_raw = params.items.gamma1
    items.alpha[...] = alpha_raw * sigma[d]
    items.beta[...] = params.items.beta - alpha_raw * mu[d]
    items.gamma1[...] = gamma1_raw * sigma[d]
    items.gamma2[...] = params.items.gamma2 * sigma_v
    items.delta[...] = (
        params.items.delta - gamma1_raw * mu[d] - params.items.gamma2 * mu_v
    )
    # the standardized point no longer satisfies the anchoring constraints
    for f in ItemParams.FAMILIES:
        getattr(items, "free_" + f)[...] = True
    out.latent.free_v[...] = True
    return StandardizedReport(
        params_star=out,
        ability_mean=mu,
        ability_scale=sigma,
        propensity_mean=mu_v,
        propensity_scale=sigma_v,
        avg_ability_weights=lam_bar,
        avg_propensity_weights=pi_bar,
        ability_corr=corr,
    )


def standardize_report(fit_result: FitResult, data: Dataset) -> StandardizedReport:
    """Standardized view of a fit; see ``standardize_parameters``."""
    return standardize_parameters(fit_result.params, fit_result.design, data)


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapReport:
    """Resampling SEs on two scales.

    The raw block covers the parameters as estimated, so anchored
    entries never vary and keep SE 0.  The standardized block
    re-expresses every replicate with the latent variables scaled to
    mean 0 and variance 1 under the original sample's average weights;
    that is the scale on which support-point uncertainty is readable.
    """

    names: list[str]
    estimate: np.ndarray
    free: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    starred: np.ndarray
    estimate_std: np.ndarray
    se_std: np.ndarray
    ci_lower_std: np.ndarray
    ci_upper_std: np.ndarray
    starred_std: np.ndarray
    n_boot: int
    n_failed: int
    base: FitResult
    replicates: np.ndarray
    replicates_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "n_boot": self.n_boot,
            "n_failed": self.n_failed,
            "names": list(self.names),
            "estimate": self.estimate.tolist(),
            "free": self.free.tolist(),
            "se": self.se.tolist(),
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
            "starred": self.starred.tolist(),
            "estimate_std": self.estimate_std.tolist(),
            "se_std": self.se_std.tolist(),
            "ci_lower_std": self.ci_lower_std.tolist(),
            "ci_upper_std": self.ci_upper_std.tolist(),
            "starred_std": self.starred_std.tolist(),
        }


def _table_values(params: Parameters) -> np.ndarray:
    return np.array([v for (_, v, _) in params.table_entries()])


def _bootstrap_replicate(args):
    (b, child, spec, design, data, cfg, base_params) = args
    rng = np.random.default_rng(child)
    idx = rng.integers(0, data.n, size=data.n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        res = fit(spec, design, data.subset(idx), cfg, init_params=base_params)
    if not res.converged:
        return b, None, None
    aligned = align_classes(base_params, res.params)
    try:
        star = standardize_parameters(aligned, design, data).params_star
    except StandardizationError:
        return b, None, None
    return b, _table_values(aligned), _table_values(star)


def bootstrap(
    spec: ModelSpec,
    design: ItemDesign,
    data: Dataset,
    config: EMConfig | None = None,
    n_boot: int = 199,
    seed: int = 0,
    workers: int = 1,
) -> BootstrapReport:
    """Nonparametric bootstrap of all model parameters.

    Subjects are resampled with replacement; every replicate is fit warm
    from the base estimate, aligned back to it, and non-converged
    replicates are dropped (counted in ``n_failed``).  Confidence bounds
    are 2.5/97.5 percentiles.  ``seed`` fixes the whole procedure; the
    result does not depend on ``workers``.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be at least 2")
    cfg = config or EMConfig()
    base = fit(spec, design, data, cfg)
    entries = base.params.table_entries()
    names = [name for name, _, _ in entries]
    estimate = np.array([v for _, v, _ in entries])
    free = np.array([f for _, _, f in entries])
    estimate_std = _table_values(
        standardize_parameters(base.params, design, data).params_star
    )

    cfg_b = replace(cfg, n_starts=1)
    children = np.random.SeedSequence(seed).spawn(n_boot)
    tasks = [
        (b, children[b], spec, design, data, cfg_b, base.params)
        for b in range(n_boot)
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bootstrap_replicate, tasks))
    else:
        results = [_bootstrap_replicate(t) for t in tasks]
    results.sort(key=lambda br: br[0])
    rows = [row for _, row, _ in results if row is not None]
    rows_std = [row for _, _, row in results if row is not None]
    n_failed = n_boot - len(rows)
    if n_failed:
        warnings.warn(
            f"{n_failed} of {n_boot} bootstrap replicates did not converge "
            "or standardize and were dropped",
            EstimationWarning,
        )
    if len(rows) < 2:
        raise ComparisonError("fewer than 2 bootstrap replicates converged")
    rep = np.vstack(rows)
    se = rep.std(axis=0, ddof=1)
    ci_lower = np.percentile(rep, 2.5, axis=0)
    ci_upper = np.percentile(rep, 97.5, axis=0)
    starred = free & (se > 0) & (np.abs(estimate) > 1.96 * se)
    rep_std = np.vstack(rows_std)
    se_std = rep_std.std(axis=0, ddof=1)
    starred_std = (se_std > 0) & (np.abs(estimate_std) > 1.96 * se_std)
    return BootstrapReport(
        names=names,
        estimate=estimate,
        free=free,
        se=se,
        ci_lower=ci_lower,
        ci_upper=ci_upper,
        starred=starred,
        estimate_std=estimate_std,
        se_std=se_std,
        ci_lower_std=np.percentile(rep_std, 2.5, axis=0),
        ci_upper_std=np.percentile(rep_std, 97.5, axis=0),
        starred_std=starred_std,
        n_boot=n_boot,
        n_failed=n_failed,
        base=base,
        replicates=rep,
        replicates_std=rep_std,
    )


# ---------------------------------------------------------------------------
# model comparison


@dataclass
class ComparisonReport:
    """Two fits side by side.

    ``deviance``/``df``/``p_value`` are set for nested likelihood-ratio
    tests.  ``bic_comparable`` is False when the two models describe
    different outcome spaces (indicator-modeling vs indicator-ignoring
    fits), in which case BIC values must not be ranked against each
    other.  ``weight_table``/``item_table`` carry the quantities of
    interest for the missingness-mechanism comparison.
    """

    labels: tuple[str, str]
    loglik: tuple[float, float]
    npar: tuple[int, int]
    bic: tuple[float, float]
    deviance: float | None = None
    df: int | None = None
    p_value: float | None = None
    bic_comparable: bool = True
    weight_table: dict | None = None
    item_table: dict | None = None
    n_boot: int = 0
    n_boot_failed: int = 0

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "loglik": list(self.loglik),
            "npar": list(self.npar),
            "bic": list(self.bic),
            "deviance": self.deviance,
            "df": self.df,
            "p_value": self.p_value,
            "bic_comparable": self.bic_comparable,
            "weight_table": self.weight_table,
            "item_table": self.item_table,
            "n_boot": self.n_boot,
            "n_boot_failed": self.n_boot_failed,
        }


def model_label(spec: ModelSpec) -> str:
    return f"{spec.parametrization}/{spec.missingness}"


def lr_test(fit_full: FitResult, fit_restricted: FitResult) -> ComparisonReport:
    """Likelihood-ratio test of a restricted model against a fuller one.

    Both fits must model the same outcomes; deviance below numerical
    zero means the "restricted" fit beat the "full" one and raises.
    """
    spec_f = fit_full.params.spec
    spec_r = fit_restricted.params.spec
    if spec_f.models_missingness != spec_r.models_missingness:
        raise ComparisonError(
            "cannot LR-test an indicator-modeling fit against an "
            "indicator-ignoring fit: the outcome spaces differ"
        )
    df = fit_full.npar - fit_restricted.npar
    if df <= 0:
        raise ComparisonError("the first fit must have more free parameters")
    deviance = 2.0 * (fit_full.loglik - fit_restricted.loglik)
    if deviance < -1e-6 * (1.0 + abs(fit_full.loglik)):
        raise ComparisonError(
            f"negative deviance {deviance:.6g}: the restricted fit has higher "
            "log-likelihood, so the models are not nested or a fit failed"
        )
    deviance = max(deviance, 0.0)
    return ComparisonReport(
        labels=(model_label(spec_f), model_label(spec_r)),
        loglik=(fit_full.loglik, fit_restricted.loglik),
        npar=(fit_full.npar, fit_restricted.npar),
        bic=(fit_full.bic, fit_restricted.bic),
        deviance=deviance,
        df=df,
        p_value=float(chi2.sf(deviance, df)),
    )


def _sorted_by_first_dim(report: StandardizedReport) -> np.ndarray:
    return np.argsort(report.params_star.latent.u_support[:, 0], kind="stable")


def _mar_deltas(spec_full, spec_ignore, design, data, cfg, base_init=None):
    inits = base_init or (None, None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        f_full = fit(spec_full, design, data, cfg, init_params=inits[0])
        f_ign = fit(spec_ignore, design, data, cfg, init_params=inits[1])
    std_full = standardize_parameters(f_full.params, design, data)
    std_ign = standardize_parameters(f_ign.params, design, data)
    ord_full = _sorted_by_first_dim(std_full)
    ord_ign = _sorted_by_first_dim(std_ign)
    w_full = std_full.avg_ability_weights[ord_full]
    w_ign = std_ign.avg_ability_weights[ord_ign]
    a_full = std_full.params_star.items.alpha
    a_ign = std_ign.params_star.items.alpha
    b_full = std_full.params_star.items.beta
    b_ign = std_ign.params_star.items.beta
    return (f_full, f_ign), (w_full, w_ign), (a_full, a_ign), (b_full, b_ign)


def compare_mar(
    spec: ModelSpec,
    design: ItemDesign,
    data: Dataset,
    config: EMConfig | None = None,
    n_boot: int = 0,
    seed: int = 0,
) -> ComparisonReport:
    """Contrast an indicator-modeling fit with the indicator-ignoring fit.

    Classes of each fit are put in a canonical order (ascending first
    standardized ability coordinate) before averaging weights.  With
    ``n_boot > 0``, joint resampling gives standard errors for the
    weight and item-parameter differences.  BIC values of the two fits
    are reported but flagged as not comparable.
    """
    if not spec.models_missingness:
        raise ComparisonError("spec must be an indicator-modeling configuration")
    cfg = config or EMConfig()
    spec_ignore = replace(spec, missingness="ignore", n_propensity_classes=1)
    fits, weights, alphas, betas = _mar_deltas(spec, spec_ignore, design, data, cfg)
    f_full, f_ign = fits
    w_full, w_ign = weights
    a_full, a_ign = alphas
    b_full, b_ign = betas

    weight_table = {
        "avg_weights": {"full": w_full.tolist(), "ignore": w_ign.tolist()},
        "delta": (w_full - w_ign).tolist(),
    }
    item_table = {
        "alpha": {"full": a_full.tolist(), "ignore": a_ign.tolist()},
        "beta": {"full": b_full.tolist(), "ignore": b_ign.tolist()},
        "alpha_delta": (a_full - a_ign).tolist(),
        "beta_delta": (b_full - b_ign).tolist(),
    }

    n_failed = 0
    if n_boot > 0:
        cfg_b = replace(cfg, n_starts=1)
        children = np.random.SeedSequence(seed).spawn(n_boot)
        dw, da, db = [], [], []
        for b in range(n_boot):
            rng = np.random.default_rng(children[b])
            idx = rng.integers(0, data.n, size=data.n)
            sub = data.subset(idx)
            try:
                reps, wgt, alp, bet = _mar_deltas(
                    spec, spec_ignore, design, sub, cfg_b,
                    base_init=(f_full.params, f_ign.params),
                )
            except StandardizationError:
                n_failed += 1
                continue
            if not (reps[0].converged and reps[1].converged):
                n_failed += 1
                continue
            dw.append(wgt[0] - wgt[1])
            da.append(alp[0] - alp[1])
            db.append(bet[0] - bet[1])
        if len(dw) >= 2:
            weight_table["delta_se"] = np.vstack(dw).std(axis=0, ddof=1).tolist()
            item_table["alpha_delta_se"] = np.vstack(da).std(axis=0, ddof=1).tolist()
            item_table["beta_delta_se"] = np.vstack(db).std(axis=0, ddof=1).tolist()

    return ComparisonReport(
        labels=(model_label(spec), model_label(spec_ignore)),
        loglik=(f_full.loglik, f_ign.loglik),
        npar=(f_full.npar, f_ign.npar),
        bic=(f_full.bic, f_ign.bic),
        bic_comparable=False,
        weight_table=weight_table,
        item_table=item_table,
        n_boot=n_boot,
        n_boot_failed=n_failed,
    )
