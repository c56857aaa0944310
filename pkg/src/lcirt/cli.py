"""Command-line interface.

Subcommands: ``fit``, ``select``, ``simulate``, ``recovery``,
``bootstrap``.  Each writes a machine-readable JSON report plus flat
CSV tables holding the same values.  Exit codes: 0 success, 2 config or
parse error, 3 numerical failure, 4 non-convergence under ``--strict``
(without the flag, non-convergence only warns).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .em import FitResult, fit
from .inference import (
    ComparisonError,
    StandardizationError,
    bootstrap,
    lr_test,
    model_label,
    standardize_report,
)
from .io import (
    FORMAT_VERSION,
    DataFormatError,
    RunConfig,
    default_item_map,
    load_run_config,
    params_to_dict,
    read_data,
    read_item_map,
    spec_to_dict,
    write_data,
    write_item_map,
    write_json,
    write_params_file,
    write_table,
)
from .model import ConfigurationError, Dataset, ItemParams, ModelSpec
from .simulate import build_custom_scenario, build_scenario, recovery_study
from .simulate import generate_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NOT_CONVERGED = 4

_NUMERICAL_ERRORS = (
    StandardizationError,
    ComparisonError,
    np.linalg.LinAlgError,
    FloatingPointError,
    OverflowError,
    ZeroDivisionError,
    RuntimeError,
)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataFormatError, OSError) as exc:
        print(f"lcirt: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as exc:
        print(f"lcirt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcirt",
        description="Latent-class IRT models with a non-ignorable missingness mechanism.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate one model on a data file")
    _add_io_options(p)
    _add_config_options(p)
    _add_model_options(p, grid=False)
    _add_em_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="fit a model grid and compare by BIC")
    _add_io_options(p)
    _add_config_options(p)
    _add_model_options(p, grid=True)
    _add_em_options(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="generate a dataset with known parameters")
    p.add_argument("--out", required=True, metavar="PREFIX", help="output path prefix")
    p.add_argument("--scenario", type=int, help="built-in scenario id (1-12)")
    p.add_argument("--n", type=int, help="subjects (custom scenario)")
    p.add_argument("--m", type=int, help="items (custom scenario)")
    p.add_argument(
        "--missingness",
        choices=("none", "v_only", "u_and_v"),
        help="missingness mechanism (custom scenario)",
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recovery", help="Monte Carlo recovery study on a scenario")
    p.add_argument("--out", required=True, metavar="PREFIX", help="output path prefix")
    p.add_argument("--scenario", type=int, required=True, help="scenario id (1-12)")
    p.add_argument("--replications", type=int, required=True, metavar="R")
    p.add_argument("--workers", type=int, help="worker processes (0 = all cores)")
    p.add_argument("--strict", action="store_true", help="exit 4 on failed replicates")
    _add_config_options(p)
    _add_em_options(p)
    p.set_defaults(func=cmd_recovery)

    p = sub.add_parser("bootstrap", help="nonparametric bootstrap standard errors")
    _add_io_options(p)
    p.add_argument("--n-boot", dest="n_boot", type=int, metavar="B")
    p.add_argument("--workers", type=int, help="worker processes (0 = all cores)")
    _add_config_options(p)
    _add_model_options(p, grid=False)
    _add_em_options(p)
    p.set_defaults(func=cmd_bootstrap)

    return parser


def _add_io_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, metavar="CSV", help="data file")
    p.add_argument("--items", required=True, metavar="CSV", help="item map file")
    p.add_argument("--out", required=True, metavar="PREFIX", help="output path prefix")
    p.add_argument(
        "--strict", action="store_true", help="exit 4 if estimation did not converge"
    )


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="JSON", help="run-config file")
    p.add_argument("--seed", type=int, help="override the config seed")


def _add_model_options(p: argparse.ArgumentParser, grid: bool) -> None:
    if grid:
        p.add_argument("--k1", metavar="LIST", help="ability class counts, e.g. 2,3")
        p.add_argument("--k2", metavar="LIST", help="propensity class counts")
        p.add_argument(
            "--parametrization", metavar="LIST", help="subset of rasch,2pl"
        )
        p.add_argument(
            "--missingness", metavar="LIST", help="subset of ignore,propensity,full"
        )
    else:
        p.add_argument("--k1", type=int, help="ability classes")
        p.add_argument("--k2", type=int, help="propensity classes")
        p.add_argument("--parametrization", choices=("rasch", "2pl"))
        p.add_argument("--missingness", choices=("ignore", "propensity", "full"))


def _add_em_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--n-starts", dest="n_starts", type=int)
    p.add_argument("--rel-tol-loglik", dest="rel_tol_loglik", type=float)
    p.add_argument("--abs-tol-param", dest="abs_tol_param", type=float)


_OVERRIDE_FIELDS = (
    "k1",
    "k2",
    "parametrization",
    "missingness",
    "max_iter",
    "n_starts",
    "rel_tol_loglik",
    "abs_tol_param",
    "seed",
    "n_boot",
    "workers",
)


def _config_from_args(args: argparse.Namespace, skip: tuple[str, ...] = ()) -> RunConfig:
    overrides = {
        name: getattr(args, name)
        for name in _OVERRIDE_FIELDS
        if name not in skip and getattr(args, name, None) is not None
    }
    return load_run_config(getattr(args, "config", None), overrides)


def _resolve_workers(config: RunConfig) -> int:
    return config.workers if config.workers > 0 else (os.cpu_count() or 1)


def _load_inputs(args, config: RunConfig):
    item_map = read_item_map(args.items)
    data, cov_names = read_data(args.data, item_map)
    design = item_map.design
    spec = config.model_spec(design.n_dims, data.n_items, len(cov_names))
    design.validate_against(spec)
    return item_map, data, cov_names, spec, design


# ---------------------------------------------------------------------------
# fit


def _fit_block(result: FitResult) -> dict:
    return {
        "loglik": result.loglik,
        "npar": result.npar,
        "bic": result.bic,
        "aic": result.aic,
        "converged": bool(result.converged),
        "n_iter": result.n_iter,
    }


def _data_block(data: Dataset) -> dict:
    return {
        "n_subjects": data.n,
        "n_items": data.n_items,
        "n_covariates": data.n_covariates,
        "missing_rate": float((data.r == 0).mean()) if data.n else 0.0,
    }


def cmd_fit(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    item_map, data, cov_names, spec, design = _load_inputs(args, config)
    result = fit(spec, design, data, config.em_config())
    std = standardize_report(result, data)

    raw_rows = result.params.table_entries()
    std_rows = std.params_star.table_entries()
    report = {
        "format_version": FORMAT_VERSION,
        "command": "fit",
        "spec": spec_to_dict(spec),
        "item_names": list(item_map.item_names),
        "covariate_names": list(cov_names),
        "dimension_labels": list(item_map.dimension_labels),
        "data": _data_block(data),
        "fit": _fit_block(result),
        "parameters": [
            {"name": n, "value": v, "free": f} for n, v, f in raw_rows
        ],
        "parameter_state": params_to_dict(result.params, design),
        "standardized": {
            "parameters": [{"name": n, "value": v} for n, v, _ in std_rows],
            **std.to_dict(),
        },
    }
    write_json(args.out + ".json", report)
    write_table(args.out + "_params.csv", ("name", "value", "free"), raw_rows)
    write_table(
        args.out + "_params_std.csv",
        ("name", "value"),
        [(n, v) for n, v, _ in std_rows],
    )
    weight_rows = [
        ("ability", h + 1, w) for h, w in enumerate(std.avg_ability_weights)
    ] + [
        ("propensity", h + 1, w) for h, w in enumerate(std.avg_propensity_weights)
    ]
    write_table(args.out + "_weights.csv", ("kind", "class", "weight"), weight_rows)
    labels = item_map.dimension_labels
    write_table(
        args.out + "_corr.csv",
        ("dimension",) + labels,
        [(labels[d],) + tuple(std.ability_corr[d]) for d in range(len(labels))],
    )
    if not result.converged:
        print("lcirt: fit did not converge", file=sys.stderr)
        if args.strict:
            return EXIT_NOT_CONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# select


def _parse_grid(text: str | None, fallback, cast, valid, flag: str) -> list:
    if text is None:
        return [fallback]
    out = []
    for token in str(text).split(","):
        token = token.strip()
        try:
            value = cast(token)
        except ValueError:
            value = None
        if value is None or (valid is not None and value not in valid):
            raise ConfigurationError(f"--{flag}: invalid value {token!r}")
        if value not in out:
            out.append(value)
    if not out:
        raise ConfigurationError(f"--{flag}: empty list")
    return out


def cmd_select(args: argparse.Namespace) -> int:
    config = _config_from_args(args, skip=("k1", "k2", "parametrization", "missingness"))
    item_map, data, cov_names, _, design = _load_inputs(args, config)

    k1s = _parse_grid(args.k1, config.k1, int, None, "k1")
    k2s = _parse_grid(args.k2, config.k2, int, None, "k2")
    pars = _parse_grid(
        args.parametrization, config.parametrization, str, ("rasch", "2pl"), "parametrization"
    )
    modes = _parse_grid(
        args.missingness,
        config.missingness,
        str,
        ("ignore", "propensity", "full"),
        "missingness",
    )

    specs: list[ModelSpec] = []
    for k1 in k1s:
        for k2 in k2s:
            for par in pars:
                for mode in modes:
                    spec = ModelSpec(
                        design.n_dims, k1, k2, data.n_items, len(cov_names), par, mode
                    )
                    if spec not in specs:
                        specs.append(spec)

    rows: list[dict] = []
    fits: dict[int, FitResult] = {}
    for i, spec in enumerate(specs):
        row = {
            "id": i,
            "model": model_label(spec),
            "k1": spec.n_ability_classes,
            "k2": spec.n_propensity_classes,
            "parametrization": spec.parametrization,
            "missingness": spec.missingness,
            "outcome_space": "y_and_r" if spec.models_missingness else "y",
            "loglik": None,
            "npar": None,
            "aic": None,
            "bic": None,
            "converged": None,
            "bic_best": False,
            "status": "ok",
        }
        try:
            result = fit(spec, design, data, config.em_config())
        except _NUMERICAL_ERRORS as exc:
            row["status"] = f"error: {exc}"
        else:
            fits[i] = result
            row.update(
                loglik=result.loglik,
                npar=result.npar,
                aic=result.aic,
                bic=result.bic,
                converged=bool(result.converged),
            )
        rows.append(row)

    # mark the BIC-minimal fitted model within each outcome space; models
    # with and without an indicator likelihood are not comparable
    for space in ("y", "y_and_r"):
        fitted = [r for r in rows if r["outcome_space"] == space and r["bic"] is not None]
        if fitted:
            min(fitted, key=lambda r: r["bic"])["bic_best"] = True

    lr_rows = []
    for i, spec_full in enumerate(specs):
        for j, spec_restr in enumerate(specs):
            if not _declared_nested(spec_full, spec_restr):
                continue
            lr_row = {
                "full": model_label(spec_full),
                "restricted": model_label(spec_restr),
                "k1": spec_full.n_ability_classes,
                "k2": spec_full.n_propensity_classes,
                "deviance": None,
                "df": None,
                "p_value": None,
                "status": "ok",
            }
            if i not in fits or j not in fits:
                lr_row["status"] = "error: a model in the pair failed to fit"
            else:
                try:
                    cr = lr_test(fits[i], fits[j])
                except ComparisonError as exc:
                    lr_row["status"] = f"error: {exc}"
                else:
                    lr_row.update(deviance=cr.deviance, df=cr.df, p_value=cr.p_value)
            lr_rows.append(lr_row)

    report = {
        "format_version": FORMAT_VERSION,
        "command": "select",
        "spec_grid": {
            "k1": k1s,
            "k2": k2s,
            "parametrization": pars,
            "missingness": modes,
        },
        "data": _data_block(data),
        "models": rows,
        "lr_tests": lr_rows,
    }
    write_json(args.out + ".json", report)
    model_cols = (
        "id",
        "model",
        "k1",
        "k2",
        "parametrization",
        "missingness",
        "outcome_space",
        "loglik",
        "npar",
        "aic",
        "bic",
        "converged",
        "bic_best",
        "status",
    )
    write_table(
        args.out + "_models.csv", model_cols, [[r[c] for c in model_cols] for r in rows]
    )
    lr_cols = ("full", "restricted", "k1", "k2", "deviance", "df", "p_value", "status")
    write_table(
        args.out + "_lr_tests.csv", lr_cols, [[r[c] for c in lr_cols] for r in lr_rows]
    )

    failed = [r for r in rows if r["status"] != "ok" or r["converged"] is False]
    if failed:
        print(f"lcirt: {len(failed)} of {len(rows)} grid cells failed or did not converge",
              file=sys.stderr)
        if args.strict:
            return EXIT_NOT_CONVERGED
    return EXIT_OK


def _declared_nested(spec_full: ModelSpec, spec_restr: ModelSpec) -> bool:
    """Rasch within 2PL, and no-ability missingness within full 2PL.

    The second pair is only nested under the 2PL parametrization: Rasch
    pins the ability effect on responding to 1, the no-ability variant
    to 0, so the Rasch pair differs without nesting.
    """
    if (
        spec_full.n_ability_classes != spec_restr.n_ability_classes
        or spec_full.n_propensity_classes != spec_restr.n_propensity_classes
    ):
        return False
    if (
        spec_full.missingness == spec_restr.missingness
        and spec_full.parametrization == "2pl"
        and spec_restr.parametrization == "rasch"
    ):
        return True
    return (
        spec_full.parametrization == "2pl"
        and spec_restr.parametrization == "2pl"
        and spec_full.missingness == "full"
        and spec_restr.missingness == "propensity"
    )


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    custom = [v is not None for v in (args.n, args.m, args.missingness)]
    if args.scenario is not None:
        if any(custom):
            raise ConfigurationError(
                "--scenario cannot be combined with --n/--m/--missingness"
            )
        scenario = build_scenario(args.scenario, seed=args.seed)
    else:
        if not all(custom):
            raise ConfigurationError(
                "custom scenarios need all of --n, --m and --missingness"
            )
        scenario = build_custom_scenario(
            args.n, args.m, args.missingness, seed=args.seed
        )

    data, truth = generate_dataset(scenario)
    item_map = default_item_map(scenario.design)
    cov_names = tuple(f"X{t + 1}" for t in range(data.n_covariates))
    write_data(args.out + "_data.csv", data, item_map, cov_names)
    write_item_map(args.out + "_items.csv", item_map)
    write_params_file(
        args.out + "_truth.json",
        truth,
        scenario.design,
        extra={
            "command": "simulate",
            "scenario": {
                "id": scenario.id,
                "n": scenario.n,
                "m": scenario.m,
                "missingness": scenario.missingness,
                "seed": scenario.seed,
            },
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# recovery


def cmd_recovery(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    scenario = build_scenario(args.scenario, seed=config.seed)
    report = recovery_study(
        scenario,
        args.replications,
        fit_config=config.em_config(),
        workers=_resolve_workers(config),
    )

    obj = {
        "format_version": FORMAT_VERSION,
        "command": "recovery",
        "scenario": {
            "id": scenario.id,
            "n": scenario.n,
            "m": scenario.m,
            "missingness": scenario.missingness,
            "seed": scenario.seed,
        },
        "report": report.to_dict(),
    }
    write_json(args.out + ".json", obj)

    k1, s = report.u_bias.shape[1], report.u_bias.shape[0]
    ability_rows = [
        (f"u[{d + 1},{h1 + 1}]", report.u_bias[d, h1], report.u_rmse[d, h1])
        for h1 in range(k1)
        for d in range(s)
    ] + [
        (f"phi[{h + 2},{t}]", report.phi_bias[h, t], report.phi_rmse[h, t])
        for h in range(report.phi_bias.shape[0])
        for t in range(report.phi_bias.shape[1])
    ]
    write_table(args.out + "_ability.csv", ("parameter", "bias", "rmse"), ability_rows)

    propensity_rows = []
    if report.v_bias is not None:
        propensity_rows += [
            (f"v[{h2 + 1}]", report.v_bias[h2], report.v_rmse[h2])
            for h2 in range(report.v_bias.size)
        ]
    if report.psi_bias is not None:
        propensity_rows += [
            (f"psi[{h + 2},{t}]", report.psi_bias[h, t], report.psi_rmse[h, t])
            for h in range(report.psi_bias.shape[0])
            for t in range(report.psi_bias.shape[1])
        ]
    write_table(
        args.out + "_propensity.csv", ("parameter", "bias", "rmse"), propensity_rows
    )

    item_rows = [
        (f, report.item_avg_abs_bias[f], report.item_avg_rmse[f])
        for f in ItemParams.FAMILIES
        if f in report.item_avg_abs_bias
    ]
    write_table(
        args.out + "_items.csv", ("family", "avg_abs_bias", "avg_rmse"), item_rows
    )

    if report.n_failed:
        print(
            f"lcirt: {report.n_failed} of {args.replications} replicates did not converge",
            file=sys.stderr,
        )
        if args.strict:
            return EXIT_NOT_CONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# bootstrap


def cmd_bootstrap(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    item_map, data, cov_names, spec, design = _load_inputs(args, config)
    report = bootstrap(
        spec,
        design,
        data,
        config.em_config(),
        n_boot=config.n_boot,
        seed=config.seed,
        workers=_resolve_workers(config),
    )

    obj = {
        "format_version": FORMAT_VERSION,
        "command": "bootstrap",
        "spec": spec_to_dict(spec),
        "item_names": list(item_map.item_names),
        "covariate_names": list(cov_names),
        "data": _data_block(data),
        "fit": _fit_block(report.base),
        "bootstrap": report.to_dict(),
    }
    write_json(args.out + ".json", obj)
    se_rows = list(
        zip(
            report.names,
            report.estimate,
            report.free,
            report.se,
            report.ci_lower,
            report.ci_upper,
            report.starred,
        )
    )
    write_table(
        args.out + "_se.csv",
        ("name", "estimate", "free", "se", "ci_lower", "ci_upper", "starred"),
        se_rows,
    )
    std_rows = list(
        zip(
            report.names,
            report.estimate_std,
            report.se_std,
            report.ci_lower_std,
            report.ci_upper_std,
            report.starred_std,
        )
    )
    write_table(
        args.out + "_se_std.csv",
        ("name", "estimate", "se", "ci_lower", "ci_upper", "starred"),
        std_rows,
    )

    if not report.base.converged or report.n_failed:
        print("lcirt: bootstrap base fit or replicates did not converge", file=sys.stderr)
        if args.strict:
            return EXIT_NOT_CONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
