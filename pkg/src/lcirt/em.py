"""Maximum-likelihood estimation by EM.

The E-step computes posterior class-pair probabilities for every subject.
The M-step splits into independent problems: one weighted multinomial
logit per latent variable for the class-weight regressions, and a
block-cyclic Newton scheme on expected sufficient statistics for the item
parameters and support points.  Every block objective is concave given
the other blocks, and elementwise step halving enforces ascent, so the
observed-data log-likelihood is nondecreasing across EM iterations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .model import (
    LOG_FLOOR,
    ConfigurationError,
    Dataset,
    ItemDesign,
    ItemParams,
    LatentStructure,
    ModelSpec,
    Parameters,
    build_parameters,
    component_logdensities,
    count_parameters,
    _log_weights,
)


class EstimationWarning(UserWarning):
    """Non-fatal estimation issues (degenerate items, non-convergence)."""


@dataclass(frozen=True)
class EMConfig:
    max_iter: int = 5000
    rel_tol_loglik: float = 1e-8
    abs_tol_param: float = 1e-6
    inner_newton_tol: float = 1e-8
    inner_newton_max: int = 50
    n_starts: int = 1
    seed: int = 0


@dataclass
class Posteriors:
    """Posterior class-pair probabilities, (n, k1, k2); rows sum to 1."""

    w: np.ndarray
    loglik: float


@dataclass
class FitResult:
    params: Parameters
    design: ItemDesign
    loglik: float
    npar: int
    bic: float
    aic: float
    converged: bool
    n_iter: int
    trace: np.ndarray
    posteriors: Posteriors


def initialize(
    spec: ModelSpec,
    design: ItemDesign,
    data: Dataset,
    seed=None,
) -> Parameters:
    """Starting point for EM.

    Support points are equally spaced grids scaled to zero mean and unit
    variance under uniform class weights.  Free difficulties come from
    inverse-logit observed rates (clamped to [0.05, 0.95]), free
    discriminations start at 1, regression coefficients at 0.  With a
    seed, free entries get an additional uniform(-0.5, 0.5) perturbation.
    """
    design.validate_against(spec)
    params = build_parameters(spec, design)
    items, lat = params.items, params.latent
    k1, k2 = spec.n_ability_classes, spec.n_propensity_classes

    lat.u_support[...] = _unit_grid(k1)[:, None]
    if lat.free_v.any():
        lat.v_support[lat.free_v] = _unit_grid(k2)[lat.free_v]

    resp = data.r.astype(bool)
    n_obs = resp.sum(axis=0)
    dead = n_obs == 0
    if dead.any():
        warnings.warn(
            f"{int(dead.sum())} item(s) have no observed responses; "
            "their difficulties start at 0",
            EstimationWarning,
        )
    n_correct = ((data.y == 1) & resp).sum(axis=0)
    rate = np.clip(n_correct / np.maximum(n_obs, 1), 0.05, 0.95)
    beta0 = np.where(dead, 0.0, np.log((1.0 - rate) / rate))
    items.beta[items.free_beta] = beta0[items.free_beta]

    if items.free_delta.any():
        rbar = np.clip(data.r.mean(axis=0), 0.05, 0.95) if data.n else np.full(
            spec.n_items, 0.5
        )
        delta0 = np.log((1.0 - rbar) / rbar)
        items.delta[items.free_delta] = delta0[items.free_delta]

    if seed is not None:
        rng = np.random.default_rng(seed)
        vec = params.free_vector()
        vec += rng.uniform(-0.5, 0.5, size=vec.size)
        params = params.with_free_vector(vec)
    return params


def _unit_grid(k: int) -> np.ndarray:
    if k == 1:
        return np.zeros(1)
    g = np.linspace(-1.0, 1.0, k)
    return g / math.sqrt(np.mean(g * g))


def e_step(params: Parameters, design: ItemDesign, data: Dataset) -> Posteriors:
    comp = component_logdensities(params, design, data)
    lse = logsumexp(comp.reshape(data.n, -1), axis=1)
    w = np.exp(comp - lse[:, None, None])
    return Posteriors(w=w, loglik=float(lse.sum()))


# ---------------------------------------------------------------------------
# M-step: class-weight regressions


def m_step_weights(
    posteriors: Posteriors,
    data: Dataset,
    latent: LatentStructure,
    config: EMConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Update phi and psi given posterior class probabilities."""
    cfg = config or EMConfig()
    phi, psi = latent.phi.copy(), latent.psi.copy()
    if phi.shape[0]:
        phi = _weighted_multinomial_logit(data.x, posteriors.w.sum(axis=2), phi, cfg)
    if psi.shape[0]:
        psi = _weighted_multinomial_logit(data.x, posteriors.w.sum(axis=1), psi, cfg)
    return phi, psi


def _weighted_multinomial_logit(
    x: np.ndarray, t: np.ndarray, coef0: np.ndarray, cfg: EMConfig
) -> np.ndarray:
    """Maximize sum_i sum_h t[i, h] log lambda_h(x_i) over the coefficients.

    Newton-Raphson with step halving; ``t`` holds nonnegative weights.
    """
    xt = np.column_stack([np.ones(x.shape[0]), x])
    coef = coef0.copy()
    km1, p = coef.shape
    ridge = 1e-12
    if t.sum(axis=0).min() < 1e-8:
        ridge = 1e-8
        warnings.warn(
            "a latent class carries almost no posterior mass", EstimationWarning
        )
    for _ in range(cfg.inner_newton_max):
        logw = _log_weights(coef, x)
        lam = np.exp(logw)
        row_tot = t.sum(axis=1, keepdims=True)
        resid = t[:, 1:] - row_tot * lam[:, 1:]
        grad = (resid.T @ xt).ravel()
        if np.max(np.abs(grad)) < cfg.inner_newton_tol:
            break
        neg_hess = np.empty((km1 * p, km1 * p))
        for g in range(km1):
            for h in range(km1):
                wgh = row_tot[:, 0] * lam[:, g + 1] * ((g == h) - lam[:, h + 1])
                neg_hess[g * p : (g + 1) * p, h * p : (h + 1) * p] = xt.T @ (
                    wgh[:, None] * xt
                )
        neg_hess[np.diag_indices(km1 * p)] += ridge
        try:
            step = np.linalg.solve(neg_hess, grad)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(neg_hess, grad, rcond=None)
        if not np.isfinite(step).all():
            warnings.warn(
                "non-finite Newton step in class-weight update", EstimationWarning
            )
            break
        q_old = float((t * logw).sum())
        scale = 1.0
        for _ in range(31):
            cand = coef + scale * step.reshape(km1, p)
            q_new = float((t * _log_weights(cand, x)).sum())
            if q_new >= q_old - 1e-12 * (1.0 + abs(q_old)):
                coef = cand
                break
            scale *= 0.5
        else:
            break  # no ascent direction left; keep current coefficients
    return coef


# ---------------------------------------------------------------------------
# M-step: item parameters and support points


@dataclass
class _ItemStats:
    """Expected sufficient statistics given posteriors.

    n1/n0: expected counts of correct/incorrect responses per (h1, j).
    m1/m0: expected counts of answered/skipped items per (h1, h2, j);
    None when response indicators are ignored.
    """

    n1: np.ndarray
    n0: np.ndarray
    m1: np.ndarray | None
    m0: np.ndarray | None


def _expected_stats(posteriors: Posteriors, data: Dataset, spec: ModelSpec) -> _ItemStats:
    w = posteriors.w
    n, k1, k2 = w.shape
    y1, y0, rf = data.float_views()
    w1 = w.sum(axis=2)
    n1 = w1.T @ y1
    n0 = w1.T @ y0
    if not spec.models_missingness:
        return _ItemStats(n1, n0, None, None)
    wf = w.reshape(n, k1 * k2)
    m1 = (wf.T @ rf).reshape(k1, k2, -1)
    m0 = wf.sum(axis=0).reshape(k1, k2)[:, :, None] - m1
    return _ItemStats(n1, n0, m1, np.maximum(m0, 0.0))


def _floored_logs(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.maximum(log_expit(z), LOG_FLOOR),
        np.maximum(log_expit(-z), LOG_FLOOR),
    )


def _obj_items_y(alpha, beta, t, stats) -> np.ndarray:
    lp1, lp0 = _floored_logs(alpha * t - beta)
    return (stats.n1 * lp1 + stats.n0 * lp0).sum(axis=0)


def _obj_items_r(gamma1, gamma2, delta, t, v, stats) -> np.ndarray:
    z = gamma1 * t[:, None, :] + gamma2 * v[None, :, None] - delta
    lq1, lq0 = _floored_logs(z)
    return (stats.m1 * lq1 + stats.m0 * lq0).sum(axis=(0, 1))


def _masked_newton_step(neg_hess, grad, free) -> np.ndarray:
    """Batched solve of neg_hess @ step = grad restricted to free entries.

    Fixed coordinates get step 0; their rows/columns are replaced by the
    identity so one batched solve covers every mask pattern.
    """
    n_units, p = grad.shape
    pair = free[:, :, None] & free[:, None, :]
    mat = np.where(pair, neg_hess, 0.0)
    idx = np.arange(p)
    diag = np.where(free, neg_hess[:, idx, idx], 1.0)
    mat[:, idx, idx] = diag + np.where(free, 1e-10 * (1.0 + np.abs(diag)), 0.0)
    g = np.where(free, grad, 0.0)
    try:
        step = np.linalg.solve(mat, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        step = np.stack(
            [np.linalg.lstsq(mat[i], g[i], rcond=None)[0] for i in range(n_units)]
        )
    step = np.where(free, step, 0.0)
    if not np.isfinite(step).all():
        warnings.warn("non-finite Newton step zeroed", EstimationWarning)
        step = np.where(np.isfinite(step), step, 0.0)
    return step


def _halve_elementwise(current, step, f_old, objective):
    """Accept per-unit steps only where the unit objective does not drop."""
    scale = np.ones(step.shape[0])
    for _ in range(31):
        cand = current + scale[:, None] * step
        f_new = objective(cand)
        bad = f_new < f_old - 1e-12 * (1.0 + np.abs(f_old))
        if not bad.any():
            return cand, f_new
        scale[bad] *= 0.5
    scale[bad] = 0.0
    cand = current + scale[:, None] * step
    return cand, objective(cand)


def _update_items_y(items: ItemParams, t, stats, cfg) -> None:
    free = np.stack([items.free_alpha, items.free_beta], axis=1)
    if not free.any():
        return
    cur = np.stack([items.alpha, items.beta], axis=1)  # (m, 2)

    def obj(mat):
        return _obj_items_y(mat[:, 0], mat[:, 1], t, stats)

    f_old = obj(cur)
    cnt = stats.n1 + stats.n0
    for _ in range(cfg.inner_newton_max):
        z = cur[:, 0] * t - cur[:, 1]
        p = expit(z)
        e = stats.n1 - cnt * p
        w = cnt * p * (1.0 - p)
        grad = np.stack([(e * t).sum(axis=0), -e.sum(axis=0)], axis=1)
        if np.max(np.abs(np.where(free, grad, 0.0))) < cfg.inner_newton_tol:
            break
        neg_hess = np.empty((cur.shape[0], 2, 2))
        neg_hess[:, 0, 0] = (w * t * t).sum(axis=0)
        neg_hess[:, 0, 1] = neg_hess[:, 1, 0] = -(w * t).sum(axis=0)
        neg_hess[:, 1, 1] = w.sum(axis=0)
        step = _masked_newton_step(neg_hess, grad, free)
        cur, f_old = _halve_elementwise(cur, step, f_old, obj)
    items.alpha[...] = cur[:, 0]
    items.beta[...] = cur[:, 1]


def _update_items_r(items: ItemParams, t, v, stats, cfg) -> None:
    free = np.stack([items.free_gamma1, items.free_gamma2, items.free_delta], axis=1)
    if not free.any():
        return
    cur = np.stack([items.gamma1, items.gamma2, items.delta], axis=1)  # (m, 3)
    tu = t[:, None, :]
    vv = v[None, :, None]

    def obj(mat):
        return _obj_items_r(mat[:, 0], mat[:, 1], mat[:, 2], t, v, stats)

    f_old = obj(cur)
    cnt = stats.m1 + stats.m0
    for _ in range(cfg.inner_newton_max):
        z = cur[:, 0] * tu + cur[:, 1] * vv - cur[:, 2]
        q = expit(z)
        e = stats.m1 - cnt * q
        w = cnt * q * (1.0 - q)
        grad = np.stack(
            [
                (e * tu).sum(axis=(0, 1)),
                (e * vv).sum(axis=(0, 1)),
                -e.sum(axis=(0, 1)),
            ],
            axis=1,
        )
        if np.max(np.abs(np.where(free, grad, 0.0))) < cfg.inner_newton_tol:
            break
        m = cur.shape[0]
        neg_hess = np.empty((m, 3, 3))
        neg_hess[:, 0, 0] = (w * tu * tu).sum(axis=(0, 1))
        neg_hess[:, 0, 1] = neg_hess[:, 1, 0] = (w * tu * vv).sum(axis=(0, 1))
        neg_hess[:, 0, 2] = neg_hess[:, 2, 0] = -(w * tu).sum(axis=(0, 1))
        neg_hess[:, 1, 1] = (w * vv * vv).sum(axis=(0, 1))
        neg_hess[:, 1, 2] = neg_hess[:, 2, 1] = -(w * vv).sum(axis=(0, 1))
        neg_hess[:, 2, 2] = w.sum(axis=(0, 1))
        step = _masked_newton_step(neg_hess, grad, free)
        cur, f_old = _halve_elementwise(cur, step, f_old, obj)
    items.gamma1[...] = cur[:, 0]
    items.gamma2[...] = cur[:, 1]
    items.delta[...] = cur[:, 2]


def _update_support(u, v, items, design, stats, spec, cfg):
    """1-d Newton on every u cell (and free v point); cells are separable."""
    m, s = design.n_items, design.n_dims
    zmat = np.zeros((m, s))
    zmat[np.arange(m), design.dimension_of] = 1.0
    mnar = spec.models_missingness

    def obj_u(u_cand):
        t = u_cand[:, design.dimension_of]
        lp1, lp0 = _floored_logs(items.alpha * t - items.beta)
        contrib = stats.n1 * lp1 + stats.n0 * lp0
        if mnar:
            z = (
                items.gamma1 * t[:, None, :]
                + items.gamma2 * v[None, :, None]
                - items.delta
            )
            lq1, lq0 = _floored_logs(z)
            contrib = contrib + (stats.m1 * lq1 + stats.m0 * lq0).sum(axis=1)
        return contrib @ zmat  # (k1, s)

    f_old = obj_u(u)
    cnt_y = stats.n1 + stats.n0
    for _ in range(cfg.inner_newton_max):
        t = u[:, design.dimension_of]
        p = expit(items.alpha * t - items.beta)
        e = stats.n1 - cnt_y * p
        w = cnt_y * p * (1.0 - p)
        grad = (e * items.alpha) @ zmat
        curv = (w * items.alpha**2) @ zmat
        if mnar:
            z = (
                items.gamma1 * t[:, None, :]
                + items.gamma2 * v[None, :, None]
                - items.delta
            )
            q = expit(z)
            cnt_r = stats.m1 + stats.m0
            er = (stats.m1 - cnt_r * q).sum(axis=1)
            wr = (cnt_r * q * (1.0 - q)).sum(axis=1)
            grad = grad + (er * items.gamma1) @ zmat
            curv = curv + (wr * items.gamma1**2) @ zmat
        if np.max(np.abs(grad)) < cfg.inner_newton_tol:
            break
        step = np.where(curv > 1e-12, grad / np.maximum(curv, 1e-12), 0.0)
        scale = np.ones_like(u)
        for _ in range(31):
            cand = u + scale * step
            f_new = obj_u(cand)
            bad = f_new < f_old - 1e-12 * (1.0 + np.abs(f_old))
            if not bad.any():
                break
            scale[bad] *= 0.5
        else:
            scale[bad] = 0.0
            cand = u + scale * step
            f_new = obj_u(cand)
        u, f_old = cand, f_new
    return u


def _update_v(u, v, free_v, items, design, stats, cfg):
    if not free_v.any():
        return v
    t = u[:, design.dimension_of]

    def obj_v(v_cand):
        z = (
            items.gamma1 * t[:, None, :]
            + items.gamma2 * v_cand[None, :, None]
            - items.delta
        )
        lq1, lq0 = _floored_logs(z)
        return (stats.m1 * lq1 + stats.m0 * lq0).sum(axis=(0, 2))

    f_old = obj_v(v)
    cnt = stats.m1 + stats.m0
    for _ in range(cfg.inner_newton_max):
        z = items.gamma1 * t[:, None, :] + items.gamma2 * v[None, :, None] - items.delta
        q = expit(z)
        e = stats.m1 - cnt * q
        w = cnt * q * (1.0 - q)
        grad = np.where(free_v, (e * items.gamma2).sum(axis=(0, 2)), 0.0)
        curv = (w * items.gamma2**2).sum(axis=(0, 2))
        if np.max(np.abs(grad)) < cfg.inner_newton_tol:
            break
        step = np.where(curv > 1e-12, grad / np.maximum(curv, 1e-12), 0.0)
        scale = np.ones_like(v)
        for _ in range(31):
            cand = v + scale * step
            f_new = obj_v(cand)
            bad = f_new < f_old - 1e-12 * (1.0 + np.abs(f_old))
            if not bad.any():
                break
            scale[bad] *= 0.5
        else:
            scale[bad] = 0.0
            cand = v + scale * step
            f_new = obj_v(cand)
        v, f_old = cand, f_new
    return v


def m_step_items_and_support(
    posteriors: Posteriors,
    data: Dataset,
    design: ItemDesign,
    params: Parameters,
    config: EMConfig | None = None,
    gain_hint: float | None = None,
) -> tuple[ItemParams, np.ndarray, np.ndarray]:
    """Maximize the expected complete-data log-likelihood in the item
    parameters and support points, cycling concave blocks to convergence.

    ``gain_hint`` (the latest observed-data log-likelihood gain) relaxes
    the cycle tolerance while EM is still far from its optimum; blocks
    ascend in every cycle, so the EM monotonicity guarantee is unaffected
    and the tolerance tightens back to ``inner_newton_tol`` as the outer
    gain vanishes.  Without a hint the full tolerance applies.
    """
    cfg = config or EMConfig()
    cycle_tol = cfg.inner_newton_tol
    if gain_hint is not None:
        # a quarter of the outer gain: sweeps beyond that cannot add outer
        # progress, and the equilibrium is one or two sweeps per M-step
        cycle_tol = max(cycle_tol, 0.25 * abs(gain_hint))
    spec = params.spec
    stats = _expected_stats(posteriors, data, spec)
    items = params.items.copy()
    u = params.latent.u_support.copy()
    v = params.latent.v_support.copy()
    free_v = params.latent.free_v

    def total(items_, u_, v_):
        t = u_[:, design.dimension_of]
        f = float(_obj_items_y(items_.alpha, items_.beta, t, stats).sum())
        if spec.models_missingness:
            f += float(
                _obj_items_r(
                    items_.gamma1, items_.gamma2, items_.delta, t, v_, stats
                ).sum()
            )
        return f

    f_total = total(items, u, v)
    for _ in range(cfg.inner_newton_max):
        _update_items_y(items, u[:, design.dimension_of], stats, cfg)
        if spec.models_missingness:
            _update_items_r(items, u[:, design.dimension_of], v, stats, cfg)
            v = _update_v(u, v, free_v, items, design, stats, cfg)
        u = _update_support(u, v, items, design, stats, spec, cfg)
        f_new = total(items, u, v)
        assert f_new >= f_total - 1e-9 * (1.0 + abs(f_total)), (
            "expected complete-data log-likelihood decreased in the M-step"
        )
        gain = f_new - f_total
        f_total = f_new
        if gain < cycle_tol:
            break
    return items, u, v


# ---------------------------------------------------------------------------
# the outer EM loop


@dataclass
class _EMRun:
    params: Parameters
    loglik: float
    converged: bool
    n_iter: int
    trace: np.ndarray
    posteriors: Posteriors


def _em_loop(params: Parameters, design, data, cfg) -> _EMRun:
    trace = []
    converged = False
    ll_prev = None
    n_iter = 0
    gain_hint = None
    for it in range(1, cfg.max_iter + 1):
        post = e_step(params, design, data)
        trace.append(post.loglik)
        if ll_prev is not None:
            gain_hint = post.loglik - ll_prev
        phi, psi = m_step_weights(post, data, params.latent, cfg)
        items, u, v = m_step_items_and_support(
            post, data, design, params, cfg, gain_hint=gain_hint
        )
        latent = LatentStructure(u, v, phi, psi, params.latent.free_v.copy())
        new_params = Parameters(params.spec, items, latent)
        delta_par = float(
            np.max(np.abs(new_params.free_vector() - params.free_vector()))
        ) if params.n_free() else 0.0
        params = new_params
        n_iter = it
        if ll_prev is not None and abs(post.loglik - ll_prev) <= cfg.rel_tol_loglik * (
            abs(ll_prev) + 1e-12
        ):
            converged = True
        if delta_par <= cfg.abs_tol_param:
            converged = True
        ll_prev = post.loglik
        if converged:
            break
    final = e_step(params, design, data)
    trace.append(final.loglik)
    return _EMRun(params, final.loglik, converged, n_iter, np.array(trace), final)


def fit(
    spec: ModelSpec,
    design: ItemDesign,
    data: Dataset,
    config: EMConfig | None = None,
    init_params: Parameters | None = None,
) -> FitResult:
    """Fit one model by EM.

    Without ``init_params``, start 0 is the deterministic initializer and
    further starts (``config.n_starts``) add seeded perturbations; the
    best final log-likelihood wins, ties going to the earliest start.
    """
    cfg = config or EMConfig()
    design.validate_against(spec)
    if data.n_items != spec.n_items:
        raise ConfigurationError(
            f"data has {data.n_items} items, spec expects {spec.n_items}"
        )
    if data.n_covariates != spec.n_covariates:
        raise ConfigurationError(
            f"data has {data.n_covariates} covariates, spec expects {spec.n_covariates}"
        )
    npar = count_parameters(spec)
    assert npar == build_parameters(spec, design).n_free()

    if data.n == 0:
        params = init_params.copy() if init_params else initialize(spec, design, data)
        post = Posteriors(
            np.zeros((0, spec.n_ability_classes, spec.n_propensity_classes)), 0.0
        )
        return FitResult(
            params, design, 0.0, npar, 0.0, 2.0 * npar, True, 0, np.array([0.0]), post
        )

    if init_params is not None:
        starts = [init_params.copy()]
    else:
        starts = [initialize(spec, design, data)]
        starts += [
            initialize(spec, design, data, seed=[cfg.seed, i])
            for i in range(1, cfg.n_starts)
        ]

    best: _EMRun | None = None
    for run_start in starts:
        run = _em_loop(run_start, design, data, cfg)
        if best is None or run.loglik > best.loglik:
            best = run

    if not best.converged:
        warnings.warn(
            f"EM stopped after {best.n_iter} iterations without meeting the "
            "convergence criteria",
            EstimationWarning,
        )
    n = data.n
    bic = -2.0 * best.loglik + math.log(n) * npar
    aic = -2.0 * best.loglik + 2.0 * npar
    return FitResult(
        params=best.params,
        design=design,
        loglik=best.loglik,
        npar=npar,
        bic=bic,
        aic=aic,
        converged=best.converged,
        n_iter=best.n_iter,
        trace=best.trace,
        posteriors=best.posteriors,
    )
