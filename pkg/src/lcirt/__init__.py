"""Latent-class IRT models with a non-ignorable missingness mechanism.

Binary item responses load on discrete multidimensional ability classes;
a second discrete latent variable drives the propensity to answer at
all, so informative missingness enters the likelihood instead of being
ignored.  Estimation is maximum likelihood via EM with covariate-
dependent class weights; model choice, bootstrap standard errors and a
simulation harness round out the toolkit.
"""

from .em import EMConfig, EstimationWarning, FitResult, e_step, fit, initialize
from .inference import (
    BootstrapReport,
    ComparisonError,
    ComparisonReport,
    StandardizationError,
    StandardizedReport,
    align_classes,
    bootstrap,
    compare_mar,
    lr_test,
    model_label,
    standardize_parameters,
    standardize_report,
)
from .io import (
    DataFormatError,
    ItemMap,
    RunConfig,
    default_item_map,
    load_run_config,
    params_from_dict,
    params_to_dict,
    read_data,
    read_item_map,
    read_params_file,
    write_data,
    write_item_map,
    write_params_file,
)
from .model import (
    MISSING,
    ConfigurationError,
    Dataset,
    ItemDesign,
    ItemParams,
    LatentStructure,
    ModelSpec,
    Parameters,
    build_parameters,
    class_weights,
    count_parameters,
    log_likelihood,
    manifest_logprob,
)
from .simulate import (
    SCENARIO_GRID,
    RecoveryReport,
    Scenario,
    build_custom_scenario,
    build_scenario,
    generate_dataset,
    recovery_study,
    solve_intercepts,
)

__version__ = "0.1.0"

__all__ = [
    "MISSING",
    "BootstrapReport",
    "ComparisonError",
    "ComparisonReport",
    "ConfigurationError",
    "DataFormatError",
    "Dataset",
    "EMConfig",
    "EstimationWarning",
    "FitResult",
    "ItemDesign",
    "ItemMap",
    "ItemParams",
    "LatentStructure",
    "ModelSpec",
    "Parameters",
    "RecoveryReport",
    "RunConfig",
    "SCENARIO_GRID",
    "Scenario",
    "StandardizationError",
    "StandardizedReport",
    "align_classes",
    "bootstrap",
    "build_custom_scenario",
    "build_parameters",
    "build_scenario",
    "class_weights",
    "compare_mar",
    "count_parameters",
    "default_item_map",
    "e_step",
    "fit",
    "generate_dataset",
    "initialize",
    "load_run_config",
    "log_likelihood",
    "lr_test",
    "manifest_logprob",
    "model_label",
    "params_from_dict",
    "params_to_dict",
    "read_data",
    "read_item_map",
    "read_params_file",
    "recovery_study",
    "solve_intercepts",
    "standardize_parameters",
    "standardize_report",
    "write_data",
    "write_item_map",
    "write_params_file",
]
