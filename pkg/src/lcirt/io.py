"""File formats: data tables, item maps, parameter files, reports.

Data files are comma-delimited text with a header row.  Columns named in
the item map hold item responses (0, 1, or missing as ``NA`` / empty
cell); every other column is a numeric covariate.  An item map lists
``item,dimension`` rows; dimension labels are numbered in first-appearance
order and the first item listed for each dimension is its anchor.

Machine-readable outputs are JSON with a ``format_version`` field and
sorted keys so identical inputs give identical bytes.  Flat tables mirror
report sections cell for cell: floats are written with ``repr``, which is
exactly the JSON rendering, and missing values as ``NA``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .em import EMConfig
from .model import (
    MISSING,
    ConfigurationError,
    Dataset,
    ItemDesign,
    ItemParams,
    LatentStructure,
    ModelSpec,
    Parameters,
)

FORMAT_VERSION = "1"


class DataFormatError(ValueError):
    """A file does not match its documented format."""


# ---------------------------------------------------------------------------
# item map


@dataclass(frozen=True)
class ItemMap:
    """Item column names with their dimension assignment.

    ``dimension_of[j]`` indexes ``dimension_labels``; items appear in
    file order, which fixes the anchor (first item per dimension).
    """

    item_names: tuple[str, ...]
    dimension_labels: tuple[str, ...]
    dimension_of: tuple[int, ...]

    @property
    def design(self) -> ItemDesign:
        return ItemDesign(np.array(self.dimension_of))


def read_item_map(path: str) -> ItemMap:
    rows = _read_csv_rows(path)
    if not rows:
        raise DataFormatError(f"{path}: empty item map")
    header = rows[0]
    if header != ["item", "dimension"]:
        raise DataFormatError(
            f"{path}, line 1: expected header 'item,dimension', got {','.join(header)!r}"
        )
    names: list[str] = []
    labels: list[str] = []
    dims: list[int] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise DataFormatError(f"{path}, line {lineno}: expected 2 fields")
        item, label = row[0].strip(), row[1].strip()
        if not item or not label:
            raise DataFormatError(f"{path}, line {lineno}: empty item or dimension")
        if item in names:
            raise DataFormatError(f"{path}, line {lineno}: duplicate item {item!r}")
        if label not in labels:
            labels.append(label)
        names.append(item)
        dims.append(labels.index(label))
    if not names:
        raise DataFormatError(f"{path}: item map lists no items")
    return ItemMap(tuple(names), tuple(labels), tuple(dims))


def write_item_map(path: str, item_map: ItemMap) -> None:
    rows = [
        (name, item_map.dimension_labels[d])
        for name, d in zip(item_map.item_names, item_map.dimension_of)
    ]
    write_table(path, ["item", "dimension"], rows)


def default_item_map(design: ItemDesign) -> ItemMap:
    """I01../dim1.. names for simulated datasets."""
    width = max(2, len(str(design.n_items)))
    names = tuple(f"I{j + 1:0{width}d}" for j in range(design.n_items))
    labels = tuple(f"dim{d + 1}" for d in range(design.n_dims))
    return ItemMap(names, labels, tuple(int(d) for d in design.dimension_of))


# ---------------------------------------------------------------------------
# data files


def read_data(path: str, item_map: ItemMap) -> tuple[Dataset, tuple[str, ...]]:
    """Load a data file; returns the dataset and covariate column names.

    Columns named in the item map become item responses in item-map
    order regardless of file order; all remaining columns are numeric
    covariates in file order.
    """
    rows = _read_csv_rows(path)
    if not rows:
        raise DataFormatError(f"{path}: empty data file")
    header = rows[0]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise DataFormatError(f"{path}, line 1: duplicate columns {dupes}")
    missing_items = [name for name in item_map.item_names if name not in header]
    if missing_items:
        raise DataFormatError(f"{path}: missing item columns {missing_items}")
    item_cols = [header.index(name) for name in item_map.item_names]
    cov_cols = [k for k in range(len(header)) if k not in set(item_cols)]

    y_rows, x_rows = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(
                f"{path}, line {lineno}: expected {len(header)} fields, got {len(row)}"
            )
        y_row = []
        for name, k in zip(item_map.item_names, item_cols):
            cell = row[k].strip()
            if cell in ("", "NA"):
                y_row.append(MISSING)
            elif cell in ("0", "1"):
                y_row.append(int(cell))
            else:
                raise DataFormatError(
                    f"{path}, line {lineno}, column {name!r}: "
                    f"item response must be 0, 1, NA or empty, got {cell!r}"
                )
        x_row = []
        for k in cov_cols:
            cell = row[k].strip()
            try:
                value = float(cell)
            except ValueError:
                value = math.nan
            if not math.isfinite(value):
                raise DataFormatError(
                    f"{path}, line {lineno}, column {header[k]!r}: "
                    f"covariate must be a finite number, got {cell!r}"
                )
            x_row.append(value)
        y_rows.append(y_row)
        x_rows.append(x_row)

    n = len(y_rows)
    y = np.array(y_rows, dtype=np.int8).reshape(n, len(item_cols))
    x = np.array(x_rows, dtype=float).reshape(n, len(cov_cols))
    return Dataset(y, x), tuple(header[k] for k in cov_cols)


def write_data(
    path: str, data: Dataset, item_map: ItemMap, covariate_names: tuple[str, ...]
) -> None:
    if data.n_items != len(item_map.item_names):
        raise ConfigurationError("item map does not match the dataset")
    if data.n_covariates != len(covariate_names):
        raise ConfigurationError("covariate names do not match the dataset")
    header = list(item_map.item_names) + list(covariate_names)
    rows = []
    for i in range(data.n):
        cells = ["NA" if v == MISSING else str(int(v)) for v in data.y[i]]
        cells += [repr(float(v)) for v in data.x[i]]
        rows.append(cells)
    write_table(path, header, rows)


# ---------------------------------------------------------------------------
# parameter files


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "n_dims": spec.n_dims,
        "n_ability_classes": spec.n_ability_classes,
        "n_propensity_classes": spec.n_propensity_classes,
        "n_items": spec.n_items,
        "n_covariates": spec.n_covariates,
        "parametrization": spec.parametrization,
        "missingness": spec.missingness,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    try:
        return ModelSpec(**{f.name: d[f.name] for f in fields(ModelSpec)})
    except KeyError as exc:
        raise DataFormatError(f"model spec is missing field {exc.args[0]!r}") from exc


def params_to_dict(params: Parameters, design: ItemDesign) -> dict:
    items, lat = params.items, params.latent
    d = {
        "spec": spec_to_dict(params.spec),
        "dimension_of": design.dimension_of.tolist(),
        "items": {f: getattr(items, f).tolist() for f in ItemParams.FAMILIES},
        "free_items": {
            f: getattr(items, "free_" + f).tolist() for f in ItemParams.FAMILIES
        },
        "latent": {
            "u_support": lat.u_support.tolist(),
            "v_support": lat.v_support.tolist(),
            "phi": lat.phi.tolist(),
            "psi": lat.psi.tolist(),
            "free_v": lat.free_v.tolist(),
        },
    }
    return d


def params_from_dict(d: dict) -> tuple[Parameters, ItemDesign]:
    try:
        spec = spec_from_dict(d["spec"])
        design = ItemDesign(np.array(d["dimension_of"]))
        items = ItemParams(
            **{f: np.array(d["items"][f], dtype=float) for f in ItemParams.FAMILIES},
            **{
                "free_" + f: np.array(d["free_items"][f], dtype=bool)
                for f in ItemParams.FAMILIES
            },
        )
        lat = d["latent"]
        latent = LatentStructure(
            u_support=np.array(lat["u_support"], dtype=float),
            v_support=np.array(lat["v_support"], dtype=float),
            phi=np.array(lat["phi"], dtype=float),
            psi=np.array(lat["psi"], dtype=float),
            free_v=np.array(lat["free_v"], dtype=bool),
        )
    except KeyError as exc:
        raise DataFormatError(f"parameter file is missing field {exc.args[0]!r}") from exc
    params = Parameters(spec, items, latent)
    design.validate_against(spec)
    return params, design


def write_params_file(
    path: str, params: Parameters, design: ItemDesign, extra: dict | None = None
) -> None:
    obj = {"format_version": FORMAT_VERSION, "parameters": params_to_dict(params, design)}
    if extra:
        obj.update(extra)
    write_json(path, obj)


def read_params_file(path: str) -> tuple[Parameters, ItemDesign]:
    obj = read_json(path)
    if "parameters" not in obj:
        raise DataFormatError(f"{path}: not a parameter file (no 'parameters' field)")
    return params_from_dict(obj["parameters"])


# ---------------------------------------------------------------------------
# JSON reports and flat tables


def _jsonify(obj):
    """Plain-Python copy: numpy scalars/arrays unwrapped, non-finite → None."""
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(path: str, obj: dict) -> None:
    text = json.dumps(_jsonify(obj), indent=2, sort_keys=True, allow_nan=False)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def read_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise DataFormatError(f"{path}: expected a JSON object at top level")
    return obj


def format_cell(value) -> str:
    """Table cell text; matches the JSON rendering of the same value."""
    if value is None:
        return "NA"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        f = float(value)
        return repr(f) if math.isfinite(f) else "NA"
    return str(value)


def write_table(path: str, header: list[str] | tuple, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def read_table(path: str) -> tuple[list[str], list[list[str]]]:
    rows = _read_csv_rows(path)
    if not rows:
        raise DataFormatError(f"{path}: empty table")
    return rows[0], rows[1:]


def _read_csv_rows(path: str) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [row for row in csv.reader(fh) if row]


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Model, estimation, and resampling settings for the command line.

    ``workers = 0`` means one worker per available core.  Fields mirror
    the config-file keys; command-line flags override file values.
    """

    k1: int = 2
    k2: int = 2
    parametrization: str = "2pl"
    missingness: str = "full"
    max_iter: int = 5000
    rel_tol_loglik: float = 1e-8
    abs_tol_param: float = 1e-6
    inner_newton_tol: float = 1e-8
    inner_newton_max: int = 50
    n_starts: int = 1
    seed: int = 0
    n_boot: int = 199
    workers: int = 0

    def __post_init__(self):
        _check_field("k1", self.k1, int, lambda v: v >= 1, "must be >= 1")
        _check_field("k2", self.k2, int, lambda v: v >= 1, "must be >= 1")
        _check_field(
            "parametrization",
            self.parametrization,
            str,
            lambda v: v in ("rasch", "2pl"),
            "must be 'rasch' or '2pl'",
        )
        _check_field(
            "missingness",
            self.missingness,
            str,
            lambda v: v in ("ignore", "propensity", "full"),
            "must be 'ignore', 'propensity' or 'full'",
        )
        _check_field("max_iter", self.max_iter, int, lambda v: v >= 1, "must be >= 1")
        for name in ("rel_tol_loglik", "abs_tol_param", "inner_newton_tol"):
            _check_field(name, getattr(self, name), float, lambda v: v > 0, "must be > 0")
        _check_field(
            "inner_newton_max", self.inner_newton_max, int, lambda v: v >= 1, "must be >= 1"
        )
        _check_field("n_starts", self.n_starts, int, lambda v: v >= 1, "must be >= 1")
        _check_field("seed", self.seed, int, lambda v: True, "")
        _check_field("n_boot", self.n_boot, int, lambda v: v >= 2, "must be >= 2")
        _check_field("workers", self.workers, int, lambda v: v >= 0, "must be >= 0")

    def em_config(self) -> EMConfig:
        return EMConfig(
            max_iter=self.max_iter,
            rel_tol_loglik=self.rel_tol_loglik,
            abs_tol_param=self.abs_tol_param,
            inner_newton_tol=self.inner_newton_tol,
            inner_newton_max=self.inner_newton_max,
            n_starts=self.n_starts,
            seed=self.seed,
        )

    def model_spec(self, n_dims: int, n_items: int, n_covariates: int) -> ModelSpec:
        return ModelSpec(
            n_dims=n_dims,
            n_ability_classes=self.k1,
            n_propensity_classes=self.k2,
            n_items=n_items,
            n_covariates=n_covariates,
            parametrization=self.parametrization,
            missingness=self.missingness,
        )


def _check_field(name, value, typ, ok, message):
    if typ is int and isinstance(value, bool):
        raise ConfigurationError(f"config field {name!r}: expected an integer")
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"config field {name!r}: expected a number")
    elif not isinstance(value, typ):
        raise ConfigurationError(
            f"config field {name!r}: expected {typ.__name__}, got {type(value).__name__}"
        )
    if not ok(value):
        raise ConfigurationError(f"config field {name!r}: {message}")


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Config file merged with non-None overrides, validated field by field."""
    values: dict = {}
    if path is not None:
        obj = read_json(path)
        known = {f.name for f in fields(RunConfig)}
        for key in obj:
            if key == "format_version":
                continue
            if key not in known:
                raise ConfigurationError(f"config field {key!r}: unknown field")
        values.update({k: v for k, v in obj.items() if k != "format_version"})
    config = RunConfig(**values)
    if overrides:
        config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    return config
