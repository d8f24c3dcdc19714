"""
DiffKnock — Selección knockoff+
Umbral adaptativo τ sobre estadísticos antisimétricos y evaluación de la
selección frente al conjunto causal conocido.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, List, Optional, Sequence, Set

import numpy as np
import pandas as pd

from diffknock.core.errors import ConfigError, DataError
from diffknock.models.schemas import SelectionEvaluation, SelectionResult
from diffknock.utils.logger import get_logger

logger = get_logger("Selection")


def _as_vector(W) -> np.ndarray:
    values = np.asarray(getattr(W, "W", W), dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise DataError("vector W vacío", stage="selection")
    if not np.isfinite(values).all():
        raise DataError("W contiene valores no finitos", stage="selection")
    return values


def knockoff_plus_threshold(W, q: float) -> float:
    """
    τ = mínimo t ∈ {|W_j| : W_j ≠ 0} con (1 + #{W ≤ −t}) / max(#{W ≥ t}, 1) ≤ q.
    Devuelve +inf si ningún candidato cumple.
    """
    if not 0.0 < q < 1.0:
        raise ConfigError(f"q debe estar en (0, 1): {q}", stage="selection")
    w = _as_vector(W)
    candidates = np.unique(np.abs(w[w != 0.0]))
    for t in candidates:
        ratio = (1.0 + np.count_nonzero(w <= -t)) / max(np.count_nonzero(w >= t), 1)
        if ratio <= q:
            return float(t)
    return math.inf


def knockoff_plus_select(W, q: float, names: Optional[Sequence[str]] = None) -> SelectionResult:
    w = _as_vector(W)
    tau = knockoff_plus_threshold(w, q)
    if math.isinf(tau):
        selected: List[int] = []
        estimated = None
    else:
        selected = [int(j) for j in np.flatnonzero(w >= tau)]
        estimated = (1.0 + np.count_nonzero(w <= -tau)) / max(len(selected), 1)
    result = SelectionResult(
        tau=tau,
        q=float(q),
        selected=selected,
        selected_names=[str(names[j]) for j in selected] if names is not None else [],
        estimated_fdp=estimated,
        method=getattr(W, "method", None),
    )
    logger.debug("[Select] q=%.3f τ=%s seleccionadas=%d", q, tau, len(selected))
    return result


def false_discovery_proportion(selected: Iterable[int], truth: Iterable[int]) -> float:
    chosen = set(int(j) for j in selected)
    causal = set(int(j) for j in truth)
    return len(chosen - causal) / max(len(chosen), 1)


def evaluate_selection(selected: Iterable[int], truth: Iterable[int]) -> SelectionEvaluation:
    chosen: Set[int] = set(int(j) for j in selected)
    causal: Set[int] = set(int(j) for j in truth)
    if not causal:
        raise DataError("conjunto causal vacío: la potencia no está definida", stage="selection")
    hits = len(chosen & causal)
    return SelectionEvaluation(
        power=hits / len(causal),
        fdp=false_discovery_proportion(chosen, causal),
        true_positives=hits,
        false_positives=len(chosen - causal),
    )


def selection_frequency(selections: Sequence[Iterable[str]], names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Porcentaje de repeticiones en que se selecciona cada característica (descendente)."""
    runs = [set(map(str, s)) for s in selections]
    counts = Counter(name for run in runs for name in run)
    universe = list(names) if names is not None else sorted(counts)
    total = max(len(runs), 1)
    frame = pd.DataFrame({
        "feature": universe,
        "count": [counts.get(name, 0) for name in universe],
    })
    frame["percent"] = 100.0 * frame["count"] / total
    return frame.sort_values(["count", "feature"], ascending=[False, True], kind="mergesort").reset_index(drop=True)
