"""
DiffKnock — Esquemas
Modelos pydantic de configuración, resultados y reportes.
"""

from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ScenarioKind = Literal["linear", "polynomial", "mixed", "bottleneck", "multiscale", "network"]
GeneratorKind = Literal["diffusion", "autoencoder"]
StatisticKind = Literal["gradient", "filter"]
LossKind = Literal["auto", "mse", "bce"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ─── Configuración ───────────────────────────────────────

class DiffusionTrainConfig(_Strict):
    layers: int = Field(6, ge=1)
    d_model: int = Field(256, ge=1)
    heads: int = Field(8, ge=1)
    timesteps: int = Field(1000, ge=1)
    schedule: Literal["cosine", "linear"] = "cosine"
    schedule_offset: float = Field(0.008, gt=0)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    clip_norm: Optional[float] = Field(1.0, gt=0)
    patience: Optional[int] = Field(None, ge=1)
    sample_shard_rows: int = Field(256, ge=1)
    log_every: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "DiffusionTrainConfig":
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} debe ser divisible entre heads={self.heads}")
        return self


class AutoencoderConfig(_Strict):
    bottleneck: int = Field(3, ge=1)
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    clip_norm: Optional[float] = Field(1.0, gt=0)
    log_every: int = Field(50, ge=1)


class FilterTrainConfig(_Strict):
    hidden: List[int] = Field(default_factory=lambda: [50, 20])
    dropout: float = Field(0.1, ge=0, lt=1)
    loss: LossKind = "auto"
    epochs: int = Field(1000, ge=1)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    clip_norm: Optional[float] = Field(None, gt=0)
    filter_init: Tuple[float, float] = (0.9, 1.1)
    log_every: int = Field(100, ge=1)

    @field_validator("hidden")
    @classmethod
    def _positive_hidden(cls, value: List[int]) -> List[int]:
        if not value or any(h <= 0 for h in value):
            raise ValueError("hidden debe ser una lista no vacía de enteros positivos")
        return value


class NormalizationSpec(_Strict):
    log1p: bool = True
    standardize: bool = True


class SimConfig(_Strict):
    n: int = Field(1000, ge=2)
    p: int = Field(50, ge=1)
    s: int = Field(5, ge=0)
    block_sizes: Optional[List[int]] = None
    block_size: int = Field(10, ge=1)
    rho_range: Tuple[float, float] = (0.4, 0.8)
    rho_fixed: Optional[float] = Field(None, ge=0, lt=1)
    baseline_range: Tuple[float, float] = (2.0, 6.0)
    library_log_sd: float = Field(0.5, ge=0)
    count_noise: bool = False
    amplitude: float = Field(3.0, ge=0)
    scenario: ScenarioKind = "linear"
    noise_sd: float = Field(1.0, ge=0)
    multiscale_main: float = 0.3
    multiscale_harmonic: float = 0.1
    multiscale_cross: float = 0.1
    network_weight_sd: float = Field(0.3, ge=0)
    seed: int = Field(0, ge=0)
    q: float = Field(0.2, gt=0, lt=1)
    repetitions: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _feasible(self) -> "SimConfig":
        if self.s > self.p:
            raise ValueError(f"s={self.s} no puede superar p={self.p}")
        lo, hi = self.rho_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"rho_range debe estar dentro de (0, 1): {self.rho_range}")
        if self.block_sizes is not None and sum(self.block_sizes) != self.p:
            raise ValueError(f"block_sizes suma {sum(self.block_sizes)}, se esperaba p={self.p}")
        if self.block_sizes is not None and any(b <= 0 for b in self.block_sizes):
            raise ValueError("block_sizes debe contener enteros positivos")
        return self

    def resolved_blocks(self) -> List[int]:
        if self.block_sizes is not None:
            return list(self.block_sizes)
        full, rest = divmod(self.p, self.block_size)
        return [self.block_size] * full + ([rest] if rest else [])


class ScreeningConfig(_Strict):
    keep: Optional[int] = Field(None, ge=1)
    fractions: Tuple[float, float, float] = (0.5, 0.4, 0.1)
    repetitions: int = Field(100, ge=1)

    @field_validator("fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f < 0 for f in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"las fracciones deben ser no negativas y sumar 1: {value}")
        return value


class ExperimentGrid(_Strict):
    scenarios: List[ScenarioKind] = Field(default_factory=lambda: ["linear"])
    amplitudes: Optional[List[float]] = None
    amplitude_min: float = Field(0.5, ge=0)
    amplitude_max: float = Field(7.0, ge=0)
    amplitude_points: int = Field(20, ge=1)
    repetitions: int = Field(50, ge=1)
    generators: List[GeneratorKind] = Field(default_factory=lambda: ["diffusion"])
    statistics: List[StatisticKind] = Field(default_factory=lambda: ["gradient", "filter"])
    q: float = Field(0.2, gt=0, lt=1)

    def amplitude_values(self) -> List[float]:
        if self.amplitudes is not None:
            return [float(a) for a in self.amplitudes]
        if self.amplitude_points == 1:
            return [float(self.amplitude_min)]
        step = (self.amplitude_max - self.amplitude_min) / (self.amplitude_points - 1)
        return [float(self.amplitude_min + i * step) for i in range(self.amplitude_points)]


class DataSource(_Strict):
    features_path: Optional[str] = None
    response_path: Optional[str] = None
    response_column: Optional[str] = None
    impute: Literal["error", "median"] = "error"


class PipelineConfig(_Strict):
    data: DataSource = Field(default_factory=DataSource)
    simulation: Optional[SimConfig] = None
    normalization: NormalizationSpec = Field(default_factory=NormalizationSpec)
    generator: GeneratorKind = "diffusion"
    diffusion: DiffusionTrainConfig = Field(default_factory=DiffusionTrainConfig)
    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    filter: FilterTrainConfig = Field(default_factory=FilterTrainConfig)
    statistic: StatisticKind = "gradient"
    q: float = Field(0.2, gt=0, lt=1)
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/default"
    screening: ScreeningConfig = Field(default_factory=ScreeningConfig)
    experiment: ExperimentGrid = Field(default_factory=ExperimentGrid)

    @model_validator(mode="after")
    def _single_source(self) -> "PipelineConfig":
        has_file = bool(self.data.features_path)
        has_sim = self.simulation is not None
        if has_file == has_sim:
            raise ValueError("se requiere exactamente una fuente de datos: data.features_path o simulation")
        return self


# ─── Resultados ──────────────────────────────────────────

class SelectionResult(BaseModel):
    tau: float
    q: float
    selected: List[int]
    selected_names: List[str] = Field(default_factory=list)
    estimated_fdp: Optional[float] = None
    method: Optional[str] = None


class SelectionEvaluation(BaseModel):
    power: float
    fdp: float
    true_positives: int
    false_positives: int


class KnockoffQualityReport(BaseModel):
    feature_names: List[str]
    ks: List[float]
    corr_diff_max: float
    corr_diff_mean: float
    corr_diff_matrix: List[List[float]]
    cross_correlation: List[float]
    swap_invariance: Optional[float] = None
    delta_hat: float


class EvalRecord(BaseModel):
    scenario: str
    amplitude: float
    generator: str
    statistic: str
    rep: int
    power: Optional[float] = None
    fdp: Optional[float] = None
    n_selected: Optional[int] = None
    tau: Optional[float] = None
    status: Literal["ok", "error"] = "ok"
    error: Optional[str] = None


class ArmSummary(BaseModel):
    scenario: str
    amplitude: float
    generator: str
    statistic: str
    repetitions: int
    failures: int
    mean_power: Optional[float] = None
    se_power: Optional[float] = None
    mean_fdr: Optional[float] = None
    se_fdr: Optional[float] = None


class EvalTable(BaseModel):
    records: List[EvalRecord] = Field(default_factory=list)
    summary: List[ArmSummary] = Field(default_factory=list)
    partial: bool = False


class RunManifest(BaseModel):
    version: str
    config: Dict
    config_hash: str
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    packages: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
