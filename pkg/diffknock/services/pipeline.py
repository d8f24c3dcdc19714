"""
DiffKnock — Pipeline
Etapas: datos -> normalización -> generador -> knockoffs -> estadísticos ->
selección -> diagnósticos, cada una con su etiqueta y sus artefactos en el
directorio de salida. Un manifiesto idéntico hace la ejecución idempotente.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version as package_version
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from diffknock.core.errors import ConfigError, DataError, DiffKnockError
from diffknock.core.rng import derive_int_seed, derive_rng
from diffknock.models.matrix import FeatureMatrix
from diffknock.models.schemas import (
    KnockoffQualityReport,
    NormalizationSpec,
    PipelineConfig,
    RunManifest,
    SelectionResult,
)
from diffknock.services import statistics as stats_service
from diffknock.services.baseline import AutoencoderKnockoffGenerator
from diffknock.services.diagnostics import export_report, quality_report, screen_features, statistics_by_label
from diffknock.services.diffusion import DiffusionKnockoffGenerator
from diffknock.services.selection import evaluate_selection, knockoff_plus_select, selection_frequency
from diffknock.services.simgen import ScenarioTruth, simulate
from diffknock.utils.checkpoint import load_checkpoint
from diffknock.utils.config_store import config_hash, config_snapshot
from diffknock.utils.io import (
    ingest_csv,
    read_json,
    read_response,
    sha256_file,
    write_json,
    write_matrix_csv,
    write_table_csv,
    write_vector_csv,
)
from diffknock.utils.logger import get_logger
from diffknock.version import __version__

logger = get_logger("Pipeline")

TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "dcor", "PyYAML")


# ─── Normalización ───────────────────────────────────────

@dataclass
class NormalizationParams:
    names: List[str]
    log1p: bool
    standardize: bool
    mean: np.ndarray
    sd: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {"names": self.names, "log1p": self.log1p, "standardize": self.standardize,
                "mean": self.mean, "sd": self.sd}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormalizationParams":
        return cls(list(data["names"]), bool(data["log1p"]), bool(data["standardize"]),
                   np.asarray(data["mean"], dtype=np.float64), np.asarray(data["sd"], dtype=np.float64))

    def invert(self, values: np.ndarray) -> np.ndarray:
        out = np.asarray(values, dtype=np.float64)
        if self.standardize:
            out = out * self.sd + self.mean
        if self.log1p:
            out = np.expm1(out)
        return out


def normalize(data: FeatureMatrix, spec: Optional[NormalizationSpec] = None) -> Tuple[FeatureMatrix, NormalizationParams]:
    """log1p opcional y después media 0 / varianza 1 por columna (sd poblacional)."""
    spec = spec or NormalizationSpec()
    values = data.values.copy()
    if spec.log1p:
        if np.any(values <= -1.0):
            bad = [data.names[j] for j in np.flatnonzero((values <= -1.0).any(axis=0))]
            raise DataError(f"log1p indefinido (valores <= -1) en columnas {bad[:10]}", stage="normalize")
        values = np.log1p(values)
    mean = values.mean(axis=0)
    sd = values.std(axis=0)
    if spec.standardize:
        flat = np.flatnonzero(sd == 0.0)
        if flat.size:
            raise DataError(f"columnas con varianza cero: {[data.names[j] for j in flat]}", stage="normalize")
        values = (values - mean) / sd
    params = NormalizationParams(list(data.names), spec.log1p, spec.standardize, mean, sd)
    return FeatureMatrix(values, list(data.names)), params


# ─── Datos ───────────────────────────────────────────────

@dataclass
class Dataset:
    raw: FeatureMatrix
    y: np.ndarray
    truth: Optional[ScenarioTruth] = None
    inputs: Dict[str, str] = field(default_factory=dict)


def load_dataset(cfg: PipelineConfig, out_dir: Optional[Path] = None) -> Dataset:
    if cfg.simulation is not None:
        sim = simulate(cfg.simulation)
        if out_dir is not None:
            write_matrix_csv(sim.tpm, out_dir / "features.csv")
            write_vector_csv(sim.y, out_dir / "response.csv")
            write_json(sim.truth.to_dict(sim.tpm.names), out_dir / "truth.json")
        return Dataset(sim.tpm, sim.y, sim.truth)

    features_path = Path(str(cfg.data.features_path))
    raw, y, _ = ingest_csv(features_path, cfg.data.response_column, cfg.data.impute)
    inputs = {str(features_path): sha256_file(features_path)}
    if y is None:
        if not cfg.data.response_path:
            raise ConfigError("falta la respuesta: data.response_path o data.response_column", stage="data")
        y = read_response(cfg.data.response_path)
        inputs[str(cfg.data.response_path)] = sha256_file(cfg.data.response_path)
    if y.size != raw.n:
        raise DataError(f"la respuesta tiene {y.size} valores para n={raw.n}", stage="data")
    return Dataset(raw, y, None, inputs)


def build_generator(cfg: PipelineConfig, seed: int, workers: int = 1):
    if cfg.generator == "autoencoder":
        return AutoencoderKnockoffGenerator(cfg.autoencoder, seed)
    return DiffusionKnockoffGenerator(cfg.diffusion, seed, workers)


def load_generator(path: str | Path, cfg: Optional[PipelineConfig] = None, workers: int = 1):
    """Reconstruye el generador según el `kind` guardado en la cabecera del checkpoint."""
    header, _ = load_checkpoint(path)
    kind = header.get("architecture", {}).get("kind")
    if kind == "autoencoder":
        return AutoencoderKnockoffGenerator.load(path, cfg.autoencoder if cfg else None)
    if kind == "denoiser":
        return DiffusionKnockoffGenerator.load(path, cfg.diffusion if cfg else None, workers)
    raise DataError(f"checkpoint de tipo desconocido '{kind}': {path}", stage="knockoffs")


def stage_seeds(master: int) -> Dict[str, int]:
    return {name: derive_int_seed(master, name) for name in ("generator", "knockoffs", "filter", "diagnostics")}


# ─── Pipeline ────────────────────────────────────────────

@dataclass
class PipelineResult:
    selection: SelectionResult
    report: KnockoffQualityReport
    manifest: RunManifest
    output_dir: Path
    skipped: bool = False


@contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    started = time.perf_counter()
    logger.info("[Pipeline] etapa %s", name)
    try:
        yield
    except DiffKnockError as e:
        e.with_stage(name)
        logger.error("[Pipeline] etapa %s falló: %s (artefactos parciales conservados)", name, e.message)
        raise
    finally:
        timings[name] = round(time.perf_counter() - started, 6)


def package_versions() -> Dict[str, str]:
    out = {"diffknock": __version__}
    for name in TRACKED_PACKAGES:
        try:
            out[name] = package_version(name)
        except PackageNotFoundError:
            out[name] = "unknown"
    return out


def _manifest_matches(out_dir: Path, cfg_hash: str, inputs: Dict[str, str]) -> Optional[RunManifest]:
    file = out_dir / "manifest.json"
    if not file.is_file():
        return None
    try:
        manifest = RunManifest.model_validate(read_json(file))
    except (DataError, ValueError):
        return None
    if manifest.config_hash != cfg_hash or manifest.inputs != inputs:
        return None
    for name, digest in manifest.outputs.items():
        path = out_dir / name
        if not path.is_file() or sha256_file(path) != digest:
            return None
    return manifest


def _input_hashes(cfg: PipelineConfig) -> Dict[str, str]:
    inputs: Dict[str, str] = {}
    for raw in (cfg.data.features_path, cfg.data.response_path):
        if raw and Path(raw).is_file():
            inputs[str(raw)] = sha256_file(raw)
    return inputs


def run_pipeline(cfg: PipelineConfig, workers: int = 1, force: bool = False) -> PipelineResult:
    """Ejecuta las etapas en orden y persiste cada artefacto; omite la ejecución si el manifiesto coincide."""
    out_dir = Path(cfg.output_dir)
    cfg_hash = config_hash(cfg)
    if not force:
        previous = _manifest_matches(out_dir, cfg_hash, _input_hashes(cfg))
        if previous is not None:
            logger.info("[Pipeline] manifiesto idéntico en %s; se reutilizan los artefactos", out_dir)
            selection = SelectionResult.model_validate(_json_with_inf(read_json(out_dir / "selection.json")))
            report = KnockoffQualityReport.model_validate(read_json(out_dir / "diagnostics.json"))
            return PipelineResult(selection, report, previous, out_dir, skipped=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = stage_seeds(cfg.seed)
    timings: Dict[str, float] = {}
    outputs: List[str] = []

    with _stage("data", timings):
        data = load_dataset(cfg, out_dir)
        if cfg.simulation is not None:
            outputs += ["features.csv", "response.csv", "truth.json"]

    with _stage("normalize", timings):
        X, norm = normalize(data.raw, cfg.normalization)
        write_json(norm.to_dict(), out_dir / "normalization.json")
        outputs.append("normalization.json")

    with _stage("generator", timings):
        generator = build_generator(cfg, seeds["generator"], workers).fit(X)
        generator.model.normalization = norm.to_dict()
        generator.save(out_dir / "generator.dkck")
        outputs.append("generator.dkck")

    with _stage("knockoffs", timings):
        knockoffs = generator.generate(X, seeds["knockoffs"])
        write_matrix_csv(knockoffs, out_dir / "knockoffs.csv")
        outputs.append("knockoffs.csv")

    with _stage("statistics", timings):
        net = stats_service.train_filter_network(X, knockoffs, data.y, cfg.filter, seeds["filter"])
        stats = stats_service.compute_statistics(net, X, knockoffs, data.y, cfg.statistic, workers)
        stats_service.export_statistics(stats, X.names, out_dir / "statistics.csv")
        outputs.append("statistics.csv")

    with _stage("selection", timings):
        selection = knockoff_plus_select(stats, cfg.q, X.names)
        write_json(selection, out_dir / "selection.json")
        outputs.append("selection.json")
        if data.truth is not None:
            evaluation = evaluate_selection(selection.selected, data.truth.causal)
            write_json(evaluation, out_dir / "evaluation.json")
            write_table_csv(statistics_by_label(stats, data.truth.causal, X.names), out_dir / "statistics_by_label.csv")
            outputs += ["evaluation.json", "statistics_by_label.csv"]

    with _stage("diagnostics", timings):
        report = quality_report(X, knockoffs, seed=seeds["diagnostics"])
        export_report(report, out_dir / "diagnostics.json", out_dir / "diagnostics_long.csv")
        outputs += ["diagnostics.json", "diagnostics_long.csv"]

    manifest = RunManifest(
        version=__version__,
        config=config_snapshot(cfg),
        config_hash=cfg_hash,
        inputs=data.inputs,
        outputs={name: sha256_file(out_dir / name) for name in outputs},
        packages=package_versions(),
        timings=timings,
    )
    write_json(manifest, out_dir / "manifest.json")
    logger.info("[Pipeline] %d seleccionadas (q=%.3g, τ=%s) en %s", len(selection.selected), cfg.q, selection.tau, out_dir)
    return PipelineResult(selection, report, manifest, out_dir)


def _json_with_inf(data: Dict[str, Any]) -> Dict[str, Any]:
    """En JSON τ = +inf se guarda como null."""
    out = dict(data)
    if out.get("tau") is None:
        out["tau"] = float("inf")
    return out


# ─── Selección repetida (cribado / entrenamiento / prueba) ──

def split_samples(n: int, fractions: Tuple[float, float, float] = (0.5, 0.4, 0.1),
                  seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 3:
        raise DataError(f"se necesitan al menos 3 muestras para dividir: n={n}", stage="split")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fracciones inválidas: {fractions}", stage="split")
    order = derive_rng(seed, "split").permutation(n)
    n_screen = int(np.floor(fractions[0] * n))
    n_train = int(np.floor(fractions[1] * n))
    screen = np.sort(order[:n_screen])
    train = np.sort(order[n_screen:n_screen + n_train])
    test = np.sort(order[n_screen + n_train:])
    return screen, train, test


@dataclass
class RepeatedSelection:
    frequency: Dict[str, pd.DataFrame]
    scores: List[Dict[str, Any]]
    selections: Dict[str, List[List[str]]]


def run_repeated_selection(cfg: PipelineConfig, repetitions: Optional[int] = None,
                           workers: int = 1) -> RepeatedSelection:
    """
    Por repetición: división 50/40/10, cribado por correlación de distancias en
    el bloque de cribado, knockoffs y red en el de entrenamiento, ambos
    estadísticos, selección y puntuación predictiva en el de prueba.
    """
    reps = int(repetitions or cfg.screening.repetitions)
    data = load_dataset(cfg)
    X, _ = normalize(data.raw, cfg.normalization)
    keep = cfg.screening.keep or X.p
    if keep > X.p:
        raise ConfigError(f"screening.keep={keep} supera p={X.p}", stage="screening")

    selections: Dict[str, List[List[str]]] = {"gradient": [], "filter": []}
    scores: List[Dict[str, Any]] = []
    for rep in range(reps):
        rep_seed = derive_int_seed(cfg.seed, "repeat", rep)
        seeds = stage_seeds(rep_seed)
        screen_idx, train_idx, test_idx = split_samples(X.n, cfg.screening.fractions, rep_seed)
        cols = screen_features(X.values[screen_idx], data.y[screen_idx], keep) if keep < X.p else list(range(X.p))
        cols = sorted(cols)
        train = X.take_rows(train_idx).take_columns(cols)
        test = X.take_rows(test_idx).take_columns(cols)

        generator = build_generator(cfg, seeds["generator"], workers).fit(train)
        k_train = generator.generate(train, seeds["knockoffs"])
        k_test = generator.generate(test, derive_int_seed(seeds["knockoffs"], "test"))
        net = stats_service.train_filter_network(train, k_train, data.y[train_idx], cfg.filter, seeds["filter"])
        score = stats_service.predictive_score(net, test, k_test, data.y[test_idx])
        record: Dict[str, Any] = {"rep": rep, "kept": len(cols), score["metric"]: score["value"]}
        for method in ("gradient", "filter"):
            stats = stats_service.compute_statistics(net, train, k_train, data.y[train_idx], method, workers)
            chosen = knockoff_plus_select(stats, cfg.q, train.names)
            selections[method].append(chosen.selected_names)
            record[f"n_{method}"] = len(chosen.selected)
        scores.append(record)
        logger.info("[Frequency] repetición %d/%d: %s", rep + 1, reps, record)

    frequency = {m: selection_frequency(s, X.names) for m, s in selections.items()}
    return RepeatedSelection(frequency, scores, selections)
