"""
DiffKnock — Diagnósticos de knockoffs
KS por característica, preservación de correlaciones, correlación cruzada,
invariancia al intercambio y cribado por correlación de distancias.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import dcor
import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from diffknock.core.errors import ConfigError, DataError, ShapeError
from diffknock.core.rng import derive_rng
from diffknock.models.matrix import as_array, check_same_shape, names_of
from diffknock.models.schemas import KnockoffQualityReport
from diffknock.utils.io import write_json, write_table_csv
from diffknock.utils.logger import get_logger

logger = get_logger("Diagnostics")


def ks_statistic(a, b) -> float:
    """Distancia sup entre las CDF empíricas de dos muestras."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise DataError("ks_statistic requiere muestras no vacías", stage="diagnostics")
    return float(ks_2samp(a, b).statistic)


def _corr(values: np.ndarray) -> np.ndarray:
    """Matriz de correlación con columnas constantes a 0 (1 en la diagonal)."""
    centered = values - values.mean(axis=0)
    sd = np.sqrt((centered ** 2).mean(axis=0))
    safe = np.where(sd > 0, sd, 1.0)
    z = centered / safe
    out = (z.T @ z) / values.shape[0]
    out[:, sd == 0] = 0.0
    out[sd == 0, :] = 0.0
    np.fill_diagonal(out, 1.0)
    return np.clip(out, -1.0, 1.0)


def cross_correlation(X, Xk) -> np.ndarray:
    x, xk = as_array(X), as_array(Xk)
    check_same_shape(x, xk, "X y X̃")
    xc = x - x.mean(axis=0)
    kc = xk - xk.mean(axis=0)
    denom = np.sqrt((xc ** 2).sum(axis=0) * (kc ** 2).sum(axis=0))
    num = (xc * kc).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def swap_invariance(X, Xk, subsets: int = 20, seed: int = 0) -> float:
    """máx |corr([X, X̃]) − corr([X, X̃]_swap(S))| sobre subconjuntos aleatorios S."""
    x, xk = as_array(X), as_array(Xk)
    check_same_shape(x, xk, "X y X̃")
    p = x.shape[1]
    base = _corr(np.hstack([x, xk]))
    rng = derive_rng(seed, "swap-invariance")
    worst = 0.0
    for _ in range(int(subsets)):
        mask = rng.random(p) < 0.5
        xs = np.where(mask, xk, x)
        ks = np.where(mask, x, xk)
        swapped = _corr(np.hstack([xs, ks]))
        worst = max(worst, float(np.max(np.abs(swapped - base))))
    return worst


def quality_report(X, Xk, swap_subsets: int = 20, seed: int = 0) -> KnockoffQualityReport:
    x, xk = as_array(X), as_array(Xk)
    check_same_shape(x, xk, "X y X̃")
    names = names_of(X, x.shape[1])
    ks = [ks_statistic(x[:, j], xk[:, j]) for j in range(x.shape[1])]
    diff = np.abs(_corr(x) - _corr(xk))
    off = ~np.eye(x.shape[1], dtype=bool)
    off_values = diff[off]
    report = KnockoffQualityReport(
        feature_names=names,
        ks=ks,
        corr_diff_max=float(off_values.max()) if off_values.size else 0.0,
        corr_diff_mean=float(off_values.mean()) if off_values.size else 0.0,
        corr_diff_matrix=diff.tolist(),
        cross_correlation=cross_correlation(x, xk).tolist(),
        swap_invariance=swap_invariance(x, xk, swap_subsets, seed) if swap_subsets > 0 else None,
        delta_hat=float(max(ks)),
    )
    logger.info("[Diagnose] Δ̂=%.4g corr_diff_max=%.4g swap=%s",
                report.delta_hat, report.corr_diff_max, report.swap_invariance)
    return report


def distance_correlation(a, b) -> float:
    """Correlación de distancias (estimador V sesgado); 0 si alguna muestra es constante."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"longitudes distintas: {a.size} vs {b.size}", stage="screening")
    if a.size < 2:
        raise DataError("distance_correlation requiere al menos 2 muestras", stage="screening")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return 0.0
    return float(dcor.distance_correlation(a, b))


def screen_features(X, y, k: int) -> List[int]:
    """Índices de las k mayores correlaciones de distancia con y (empates por índice)."""
    x = as_array(X)
    p = x.shape[1]
    if not 1 <= int(k) <= p:
        raise ConfigError(f"k fuera de rango [1, {p}]: {k}", stage="screening")
    scores = np.array([distance_correlation(x[:, j], y) for j in range(p)])
    order = np.lexsort((np.arange(p), -scores))
    logger.info("[Screen] conservadas %d de %d características", k, p)
    return [int(j) for j in order[: int(k)]]


def statistics_by_label(W, truth: Sequence[int], names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Tabla larga (feature, W, method, causal) para comparar causales y no causales."""
    values = np.asarray(getattr(W, "W", W), dtype=np.float64)
    method = getattr(W, "method", "")
    labels = names if names is not None else [str(j) for j in range(values.size)]
    causal = set(int(j) for j in truth)
    return pd.DataFrame({
        "feature": list(labels),
        "W": values,
        "method": method,
        "causal": [j in causal for j in range(values.size)],
    })


def report_long_frame(report: KnockoffQualityReport) -> pd.DataFrame:
    """Formato largo kind,row,col,value para graficar fuera."""
    rows: List[Dict[str, object]] = []
    names = report.feature_names
    for j, name in enumerate(names):
        rows.append({"kind": "ks", "row": name, "col": "", "value": report.ks[j]})
        rows.append({"kind": "cross_correlation", "row": name, "col": "", "value": report.cross_correlation[j]})
    for i, row in enumerate(report.corr_diff_matrix):
        for j, value in enumerate(row):
            rows.append({"kind": "corr_diff", "row": names[i], "col": names[j], "value": value})
    return pd.DataFrame(rows, columns=["kind", "row", "col", "value"])


def export_report(report: KnockoffQualityReport, json_path: str | Path, csv_path: Optional[str | Path] = None) -> Dict[str, Path]:
    out = {"json": write_json(report, json_path)}
    if csv_path is not None:
        out["csv"] = write_table_csv(report_long_frame(report), csv_path)
    return out
