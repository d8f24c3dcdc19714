"""
DiffKnock — Matrices de características
Tipos numéricos compartidos por los servicios (no son modelos pydantic: viajan
como arrays float64).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from diffknock.core.errors import DataError, ShapeError


def default_names(p: int, prefix: str = "x") -> List[str]:
    width = max(len(str(p)), 1)
    return [f"{prefix}{str(j + 1).zfill(width)}" for j in range(p)]


@dataclass
class FeatureMatrix:
    """Matriz n×p (filas = muestras) con nombres de columna."""

    values: np.ndarray
    names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"se esperaba una matriz 2D, forma {self.values.shape}")
        if not self.names:
            self.names = default_names(self.values.shape[1])
        if len(self.names) != self.values.shape[1]:
            raise ShapeError(f"{len(self.names)} nombres para {self.values.shape[1]} columnas")
        if len(set(self.names)) != len(self.names):
            raise DataError("nombres de columna duplicados")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def p(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self):
        return self.values.shape

    def take_rows(self, rows: Sequence[int]) -> "FeatureMatrix":
        return FeatureMatrix(self.values[np.asarray(rows, dtype=int)], list(self.names))

    def take_columns(self, cols: Sequence[int]) -> "FeatureMatrix":
        idx = [int(c) for c in cols]
        return FeatureMatrix(self.values[:, idx], [self.names[c] for c in idx])


@dataclass
class KnockoffMatrix:
    """Knockoffs alineados por fila con su matriz origen."""

    values: np.ndarray
    names: List[str]
    provenance: str  # raw-diffusion | marginal-matched
    fingerprint: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise ShapeError(f"knockoffs de forma {self.values.shape} con {len(self.names)} nombres")

    @property
    def shape(self):
        return self.values.shape


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "matrices") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} con formas distintas: {a.shape} vs {b.shape}")


def as_array(data: "FeatureMatrix | KnockoffMatrix | np.ndarray") -> np.ndarray:
    if isinstance(data, (FeatureMatrix, KnockoffMatrix)):
        return data.values
    return np.asarray(data, dtype=np.float64)


def names_of(data: "FeatureMatrix | KnockoffMatrix | np.ndarray", p: Optional[int] = None) -> List[str]:
    if isinstance(data, (FeatureMatrix, KnockoffMatrix)):
        return list(data.names)
    return default_names(p if p is not None else np.asarray(data).shape[1])
