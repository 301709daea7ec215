"""CSV data files, JSON configs and the versioned fitted-model document."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import DataFormatError
from ..estimation import FittedModel, psd_shift
from ..marginals import MarginalSpec
from ..model import DfmParams, LatentAcfSet

SCHEMA_VERSION = 1
MODEL_KIND = "countdfm.fitted_model"


def fmt(x) -> str:
    """Six significant digits; integers are written as integers."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    return f"{x:.6g}"


# ----------------------------------------------------------------------------
# CSV


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def load_csv(path) -> tuple[np.ndarray, list[str]]:
    """Read a ``T x d`` count matrix.  The first row must be a header; every
    other cell must be an integer.  Errors name the offending row and column
    (1-based, header is row 1)."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [row for row in csv.reader(fh) if any(cell.strip() for cell in row)]
    if not rows:
        raise DataFormatError(f"{path}: file is empty")
    header = [c.strip() for c in rows[0]]
    if all(_is_int(c) for c in header):
        raise DataFormatError(f"{path}: header row is missing")
    body = rows[1:]
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    d = len(header)
    X = np.empty((len(body), d), dtype=np.int64)
    for t, row in enumerate(body):
        if len(row) != d:
            raise DataFormatError(f"{path}: row {t + 2} has {len(row)} cells, header has {d}")
        for j, cell in enumerate(row):
            try:
                X[t, j] = int(cell.strip())
            except ValueError:
                raise DataFormatError(
                    f"{path}: row {t + 2}, column {j + 1} ({header[j]!r}): {cell!r} is not an integer"
                ) from None
    return X, header


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in row])


def write_counts(path, X: np.ndarray, names: Sequence[str] | None = None) -> None:
    X = np.asarray(X)
    names = list(names) if names is not None else [f"x{i + 1}" for i in range(X.shape[1])]
    write_table(path, names, X.tolist())


# ----------------------------------------------------------------------------
# JSON


def load_json(path) -> dict:
    try:
        with Path(path).open() as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: expected a JSON object")
    return data


def save_json(path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def matrix_to_dict(A) -> dict:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return {"rows": A.shape[0], "cols": A.shape[1], "data": [float(v) for v in A.ravel(order="C")]}


def matrix_from_dict(obj: dict) -> np.ndarray:
    try:
        rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    except (KeyError, TypeError, ValueError):
        raise DataFormatError("matrix needs integer 'rows', 'cols' and a 'data' list") from None
    if len(data) != rows * cols:
        raise DataFormatError(f"matrix data has {len(data)} entries, expected {rows * cols}")
    return np.asarray(data, dtype=float).reshape(rows, cols)


def params_to_dict(params: DfmParams) -> dict:
    return {
        "d": params.d,
        "r": params.r,
        "p": params.p,
        "Lambda": matrix_to_dict(params.Lambda),
        "Psi": [matrix_to_dict(P) for P in params.Psi],
        "Sigma_eps": matrix_to_dict(params.Sigma_eps),
        "Sigma_eta": matrix_to_dict(params.Sigma_eta),
    }


def params_from_dict(obj: dict) -> DfmParams:
    try:
        return DfmParams(
            matrix_from_dict(obj["Lambda"]),
            [matrix_from_dict(P) for P in obj["Psi"]],
            matrix_from_dict(obj["Sigma_eps"]),
            matrix_from_dict(obj["Sigma_eta"]),
        )
    except KeyError as exc:
        raise DataFormatError(f"model parameters lack {exc}") from None


def model_to_dict(model: FittedModel) -> dict:
    acf = model.latent_acf
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": MODEL_KIND,
        "params": params_to_dict(model.params),
        "marginals": [m.to_dict() for m in model.marginals],
        "R_Z": [matrix_to_dict(R) for R in acf.R_Z],
        "Sigma_Y": [matrix_to_dict(S) for S in acf.Sigma_Y],
        "eigenvalues": [float(v) for v in model.eigenvalues],
        "psd_shift": float(model.psd_shift),
        "observed_support": None
        if model.observed_support is None
        else [[int(v) for v in s] for s in model.observed_support],
    }


def model_from_dict(obj: dict) -> FittedModel:
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataFormatError(f"unsupported model schema_version {version!r}")
    if obj.get("kind") != MODEL_KIND:
        raise DataFormatError(f"not a fitted-model document (kind={obj.get('kind')!r})")
    params = params_from_dict(obj["params"])
    marginals = [MarginalSpec.from_dict(m) for m in obj["marginals"]]
    if len(marginals) != params.d:
        raise DataFormatError(f"{len(marginals)} marginals for d={params.d}")
    R_Z = [matrix_from_dict(R) for R in obj.get("R_Z", [])]
    support = obj.get("observed_support")
    model = FittedModel(
        params=params,
        marginals=marginals,
        latent_acf=LatentAcfSet(R_Z=R_Z, Sigma_Y=[matrix_from_dict(S) for S in obj.get("Sigma_Y", [])]),
        eigenvalues=np.asarray(obj.get("eigenvalues", []), dtype=float),
        psd_shift=float(obj.get("psd_shift", 0.0)),
        observed_support=None if support is None else [np.asarray(s, dtype=np.int64) for s in support],
    )
    if R_Z:
        model.R_Z0_forecast = psd_shift(R_Z[0])[0]
    return model


def save_model(path, model: FittedModel) -> None:
    save_json(path, model_to_dict(model))


def load_model(path) -> FittedModel:
    return model_from_dict(load_json(path))
