"""
DiffKnock — Entrada/salida de archivos
CSV de matrices (pandas), JSON de reportes y hashes de artefactos.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from diffknock.core.errors import DataError
from diffknock.models.matrix import FeatureMatrix, KnockoffMatrix
from diffknock.utils.logger import get_logger

logger = get_logger("IO")

MISSING_TOKENS = {"", "na", "nan", "null", "none"}


def _read_raw(path: Path) -> pd.DataFrame:
    if not path.is_file():
        raise DataError(f"archivo no encontrado: {path}", stage="ingest")
    try:
        return pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.ParserError as e:
        raise DataError(f"filas irregulares en {path}: {e}", stage="ingest") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"CSV vacío: {path}", stage="ingest") from e


def ingest_csv(
    path: str | Path,
    response_column: Optional[str] = None,
    impute: str = "error",
) -> Tuple[FeatureMatrix, Optional[np.ndarray], Dict[str, int]]:
    """
    Lee un CSV rectangular con cabecera de nombres. Devuelve la matriz, la
    respuesta (si se designó columna) y un resumen {n, p, missing}.
    """
    file = Path(path)
    raw = _read_raw(file)
    header = [str(h).strip() for h in raw.iloc[0].tolist()]
    body = raw.iloc[1:].reset_index(drop=True)

    if raw.iloc[0].isna().any() or body.isna().any().any():
        # pandas rellena con NaN las filas con menos campos que la más ancha
        bad = sorted({int(i) + 2 for i in np.where(body.isna().any(axis=1).to_numpy())[0]})
        raise DataError(f"filas irregulares en {file} (líneas {bad[:10] or [1]})", stage="ingest")
    duplicates = sorted({h for h in header if header.count(h) > 1})
    if duplicates:
        raise DataError(f"columnas duplicadas en {file}: {duplicates}", stage="ingest")
    if body.empty:
        raise DataError(f"{file} no contiene filas de datos", stage="ingest")

    body.columns = header
    missing_mask = body.apply(lambda col: col.str.strip().str.lower().isin(MISSING_TOKENS))
    numeric = body.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    bad_cells = numeric.isna() & ~missing_mask
    if bad_cells.any().any():
        row, col = next(zip(*np.where(bad_cells.to_numpy())))
        name = header[col]
        raise DataError(
            f"celda no numérica en fila {row + 1}, columna '{name}': '{body.iat[row, col]}'",
            stage="ingest",
        )

    missing = int(missing_mask.to_numpy().sum())
    if missing:
        if impute != "median":
            cols = [c for c in header if missing_mask[c].any()]
            raise DataError(f"{missing} valores ausentes en columnas {cols[:10]}", stage="ingest")
        numeric = numeric.fillna(numeric.median())
        logger.warning("[Ingest] %d valores ausentes imputados con la mediana", missing)

    response = None
    if response_column is not None:
        if response_column not in numeric.columns:
            raise DataError(f"columna de respuesta '{response_column}' no existe en {file}", stage="ingest")
        response = numeric.pop(response_column).to_numpy(dtype=np.float64)

    values = numeric.to_numpy(dtype=np.float64)
    if not np.isfinite(values).all():
        raise DataError(f"valores no finitos en {file}", stage="ingest")
    matrix = FeatureMatrix(values, list(numeric.columns))
    info = {"n": matrix.n, "p": matrix.p, "missing": missing}
    logger.info("[Ingest] %s: n=%d p=%d ausentes=%d", file.name, matrix.n, matrix.p, missing)
    return matrix, response, info


def read_response(path: str | Path, column: Optional[str] = None) -> np.ndarray:
    """Respuesta en un CSV aparte: la columna indicada o la única columna."""
    matrix, _, _ = ingest_csv(path)
    if column is None:
        if matrix.p != 1:
            raise DataError(f"{path} tiene {matrix.p} columnas; indica la columna de respuesta", stage="ingest")
        return matrix.values[:, 0].copy()
    if column not in matrix.names:
        raise DataError(f"columna de respuesta '{column}' no existe en {path}", stage="ingest")
    return matrix.values[:, matrix.names.index(column)].copy()


def write_matrix_csv(matrix: FeatureMatrix | KnockoffMatrix, path: str | Path) -> Path:
    file = Path(path)
    file.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(matrix.values, columns=list(matrix.names)).to_csv(file, index=False, lineterminator="\n")
    return file


def write_vector_csv(values: np.ndarray, path: str | Path, name: str = "y") -> Path:
    file = Path(path)
    file.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({name: np.asarray(values, dtype=np.float64)}).to_csv(file, index=False, lineterminator="\n")
    return file


def write_table_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    file = Path(path)
    file.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(file, index=False, lineterminator="\n")
    return file


def to_jsonable(obj: Any) -> Any:
    """Convierte modelos, arrays y floats no finitos (-> null) a tipos JSON."""
    if isinstance(obj, BaseModel):
        return to_jsonable(obj.model_dump())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [to_jsonable(v) for v in items]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(obj: Any, path: str | Path) -> Path:
    file = Path(path)
    file.parent.mkdir(parents=True, exist_ok=True)
    file.write_text(dumps_json(obj), encoding="utf-8")
    return file


def read_json(path: str | Path) -> Any:
    file = Path(path)
    if not file.is_file():
        raise DataError(f"archivo JSON no encontrado: {file}")
    try:
        return json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"JSON inválido en {file}: {e}") from e


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_array(values: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()
