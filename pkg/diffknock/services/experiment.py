"""
DiffKnock — Experimentos de potencia / FDR
Rejilla escenarios × amplitudes × repeticiones. Cada repetición deriva sus
streams de (seed maestro, escenario, amplitud, repetición), así que el
resultado no depende del orden de ejecución ni del número de procesos.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from itertools import groupby
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from diffknock.core.rng import derive_int_seed
from diffknock.models.matrix import FeatureMatrix
from diffknock.models.schemas import ArmSummary, EvalRecord, EvalTable, ExperimentGrid, PipelineConfig, SimConfig
from diffknock.services import statistics as stats_service
from diffknock.services.pipeline import build_generator
from diffknock.services.selection import evaluate_selection, knockoff_plus_select
from diffknock.services.simgen import generate_expression, generate_outcome, log_standardize
from diffknock.utils.io import write_json, write_table_csv
from diffknock.utils.logger import get_logger

logger = get_logger("Experiment")

ARM_KEYS = ("scenario", "amplitude", "generator", "statistic")
RECORD_COLUMNS = ["scenario", "amplitude", "generator", "statistic", "rep", "power", "fdp",
                  "n_selected", "tau", "status", "error"]


def _amplitude_key(amplitude: float) -> str:
    return f"{float(amplitude):.6g}"


def repetition_seeds(master: int, scenario: str, rep: int, amplitude: Optional[float] = None) -> Dict[str, int]:
    """Seeds de una repetición; la expresión y el generador no dependen de la amplitud."""
    seeds = {
        "expression": derive_int_seed(master, "expression", scenario, rep),
        "generator": derive_int_seed(master, "generator", scenario, rep),
        "knockoffs": derive_int_seed(master, "knockoffs", scenario, rep),
    }
    if amplitude is not None:
        key = _amplitude_key(amplitude)
        seeds["outcome"] = derive_int_seed(master, "outcome", scenario, key, rep)
        seeds["filter"] = derive_int_seed(master, "filter", scenario, key, rep)
    return seeds


def _failed(scenario: str, amplitude: float, generator: str, statistics: List[str], rep: int,
            error: Exception) -> List[EvalRecord]:
    message = f"{type(error).__name__}: {error}"
    return [EvalRecord(scenario=scenario, amplitude=amplitude, generator=generator, statistic=s, rep=rep,
                       status="error", error=message) for s in statistics]


def run_repetition(cfg: PipelineConfig, grid: ExperimentGrid, scenario: str, rep: int) -> List[EvalRecord]:
    """
    Una repetición de un escenario: simula X una vez, entrena cada generador una
    vez y, por amplitud, simula y, entrena la red filtro una vez por generador y
    evalúa todos los estadísticos pedidos. Los fallos quedan en los registros.
    """
    sim_cfg = cfg.simulation or SimConfig()
    amplitudes = grid.amplitude_values()
    base = repetition_seeds(cfg.seed, scenario, rep)
    records: List[EvalRecord] = []

    try:
        tpm, truth = generate_expression(sim_cfg, base["expression"])
        X = FeatureMatrix(log_standardize(tpm.values), list(tpm.names))
    except Exception as e:
        logger.warning("[Experiment] %s rep=%d: la simulación falló: %s", scenario, rep, e)
        for amplitude in amplitudes:
            for generator in grid.generators:
                records += _failed(scenario, amplitude, generator, grid.statistics, rep, e)
        return records

    knockoffs = {}
    errors: Dict[str, Exception] = {}
    for generator in grid.generators:
        arm_cfg = cfg.model_copy(update={"generator": generator})
        try:
            model = build_generator(arm_cfg, base["generator"]).fit(X)
            knockoffs[generator] = model.generate(X, base["knockoffs"])
        except Exception as e:
            logger.warning("[Experiment] %s rep=%d: el generador %s falló: %s", scenario, rep, generator, e)
            errors[generator] = e

    for amplitude in amplitudes:
        seeds = repetition_seeds(cfg.seed, scenario, rep, amplitude)
        try:
            y = generate_outcome(scenario, X, truth, amplitude, seeds["outcome"], sim_cfg)
        except Exception as e:
            for generator in grid.generators:
                records += _failed(scenario, amplitude, generator, grid.statistics, rep, e)
            continue
        for generator in grid.generators:
            if generator in errors:
                records += _failed(scenario, amplitude, generator, grid.statistics, rep, errors[generator])
                continue
            Xk = knockoffs[generator]
            try:
                net = stats_service.train_filter_network(X, Xk, y, cfg.filter, seeds["filter"])
            except Exception as e:
                records += _failed(scenario, amplitude, generator, grid.statistics, rep, e)
                continue
            for statistic in grid.statistics:
                try:
                    W = stats_service.compute_statistics(net, X, Xk, y, statistic)
                    chosen = knockoff_plus_select(W, grid.q, X.names)
                    evaluation = evaluate_selection(chosen.selected, truth.causal)
                    records.append(EvalRecord(
                        scenario=scenario, amplitude=amplitude, generator=generator, statistic=statistic,
                        rep=rep, power=evaluation.power, fdp=evaluation.fdp,
                        n_selected=len(chosen.selected), tau=None if math.isinf(chosen.tau) else chosen.tau,
                    ))
                except Exception as e:
                    records += _failed(scenario, amplitude, generator, [statistic], rep, e)
    return records


def _run_task(args: Tuple[PipelineConfig, ExperimentGrid, str, int]) -> List[EvalRecord]:
    cfg, grid, scenario, rep = args
    return run_repetition(cfg, grid, scenario, rep)


def _sort_key(record: EvalRecord):
    return (record.scenario, record.amplitude, record.generator, record.statistic, record.rep)


def run_experiment(cfg: PipelineConfig, grid: Optional[ExperimentGrid] = None, workers: int = 1) -> EvalTable:
    """Ejecuta la rejilla completa; con workers > 1 reparte las repeticiones en procesos."""
    grid = grid or cfg.experiment
    tasks = [(cfg, grid, scenario, rep) for scenario in grid.scenarios for rep in range(grid.repetitions)]
    logger.info("[Experiment] %d escenarios × %d amplitudes × %d repeticiones (workers=%d)",
                len(grid.scenarios), len(grid.amplitude_values()), grid.repetitions, workers)

    records: List[EvalRecord] = []
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_run_task, tasks):
                records += chunk
    else:
        for task in tasks:
            records += _run_task(task)

    records.sort(key=_sort_key)
    table = summarize(records)
    failures = sum(1 for r in records if r.status == "error")
    if failures:
        logger.warning("[Experiment] %d registros con error; resultados parciales", failures)
    return table


def _mean_se(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else None
    return float(arr.mean()), se


def summarize(records: List[EvalRecord] | EvalTable) -> EvalTable:
    """Media y error estándar de potencia y FDR por brazo (escenario, A, generador, estadístico)."""
    if isinstance(records, EvalTable):
        records = records.records
    ordered = sorted(records, key=_sort_key)
    summary: List[ArmSummary] = []
    for key, group in groupby(ordered, key=lambda r: (r.scenario, r.amplitude, r.generator, r.statistic)):
        items = list(group)
        ok = [r for r in items if r.status == "ok"]
        mean_power, se_power = _mean_se([r.power for r in ok])
        mean_fdr, se_fdr = _mean_se([r.fdp for r in ok])
        summary.append(ArmSummary(
            **dict(zip(ARM_KEYS, key)),
            repetitions=len(items),
            failures=len(items) - len(ok),
            mean_power=mean_power, se_power=se_power,
            mean_fdr=mean_fdr, se_fdr=se_fdr,
        ))
    partial = any(r.status == "error" for r in ordered)
    return EvalTable(records=ordered, summary=summary, partial=partial)


def records_frame(table: EvalTable) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in table.records], columns=RECORD_COLUMNS)


def summary_long_frame(table: EvalTable) -> pd.DataFrame:
    """Formato largo (brazo, metric, mean, se) listo para graficar curvas de potencia/FDR."""
    rows = []
    for arm in table.summary:
        for metric in ("power", "fdr"):
            rows.append({
                **{k: getattr(arm, k) for k in ARM_KEYS},
                "metric": metric,
                "mean": getattr(arm, f"mean_{metric}"),
                "se": getattr(arm, f"se_{metric}"),
                "repetitions": arm.repetitions,
                "failures": arm.failures,
            })
    return pd.DataFrame(rows, columns=[*ARM_KEYS, "metric", "mean", "se", "repetitions", "failures"])


def export_eval_table(table: EvalTable, out_dir: str | Path) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {
        "records": write_table_csv(records_frame(table), out / "eval_records.csv"),
        "summary": write_json({"partial": table.partial, "summary": table.summary}, out / "eval_summary.json"),
        "long": write_table_csv(summary_long_frame(table), out / "eval_long.csv"),
    }
