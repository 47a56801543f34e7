"""CSV and JSON input/output keyed by ``area_id``.

Every table is sorted by ``area_id`` (as strings) before matrices are built,
so outputs do not depend on the row order of the inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys

import joblib
import numpy as np
import pandas as pd
import scipy
import sklearn

from . import __version__
from .cluster import Clustering
from .survey import DirectEstimates, Microdata

FLOAT_FORMAT = "%.17g"


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def read_table(path, required: list[str]) -> pd.DataFrame:
    """Read a CSV, check required columns and sort by ``area_id``."""
    df = pd.read_csv(path, dtype={"area_id": str}, encoding="utf-8", float_precision="round_trip")
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InputError(f"{os.fspath(path)}: missing column(s) {', '.join(missing)}")
    if df[required].isna().any().any():
        bad = df.columns[df.isna().any()].tolist()
        raise InputError(f"{os.fspath(path)}: empty values in column(s) {', '.join(bad)}")
    if "area_id" in df.columns:
        df = df.sort_values("area_id", kind="stable").reset_index(drop=True)
    return df


def write_table(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def read_microdata(path) -> Microdata:
    df = read_table(path, ["area_id", "y", "w"])
    return Microdata(df["area_id"].to_numpy(), df["y"].to_numpy(float), df["w"].to_numpy(float))


def direct_frame(direct: DirectEstimates, D) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "area_id": direct.area_id,
            "y": direct.y,
            "raw_var": direct.raw_var,
            "n": direct.n,
            "nhat": direct.nhat,
            "D": np.asarray(D, dtype=float),
        }
    )


def read_direct(path) -> pd.DataFrame:
    df = read_table(path, ["area_id", "y", "D"])
    if df["area_id"].duplicated().any():
        raise InputError(f"{os.fspath(path)}: duplicated area_id values")
    if (df["D"] <= 0).any():
        raise InputError(f"{os.fspath(path)}: D must be positive")
    return df


def read_covariates(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """``(area_id, matrix, column names)`` of all columns other than area_id."""
    df = read_table(path, ["area_id"])
    cols = [c for c in df.columns if c != "area_id"]
    if not cols:
        raise InputError(f"{os.fspath(path)}: no covariate columns")
    try:
        values = df[cols].to_numpy(float)
    except ValueError as exc:
        raise InputError(f"{os.fspath(path)}: non-numeric covariate values") from exc
    return df["area_id"].to_numpy(str), values, cols


def read_clustering(path) -> tuple[np.ndarray, Clustering]:
    df = read_table(path, ["area_id", "cluster"])
    return df["area_id"].to_numpy(str), Clustering(df["cluster"].to_numpy(int))


def read_weights(path) -> tuple[np.ndarray, np.ndarray]:
    df = read_table(path, ["area_id", "w"])
    return df["area_id"].to_numpy(str), df["w"].to_numpy(float)


def check_same_areas(reference, other, what: str) -> None:
    ref = np.asarray(reference, dtype=str)
    oth = np.asarray(other, dtype=str)
    if ref.shape != oth.shape or np.any(ref != oth):
        extra = sorted(set(oth) ^ set(ref))[:5]
        raise InputError(f"{what}: area ids do not match the direct estimates (e.g. {extra})")


def run_metadata(command: str, settings: dict, seeds: dict | None = None) -> dict:
    """Versions, seeds and a hash of the effective settings."""
    blob = json.dumps(settings, sort_keys=True, default=_default).encode()
    return {
        "command": command,
        "settings": settings,
        "seeds": seeds or {},
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "versions": {
            "fhsc": __version__,
            "python": sys.version.split()[0],
            "platform": platform.platform(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "scikit-learn": sklearn.__version__,
            "joblib": joblib.__version__,
        },
    }
