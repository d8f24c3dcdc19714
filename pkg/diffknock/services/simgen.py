"""
DiffKnock — Simulador de expresión tipo TPM
Latentes gaussianos por bloques, expresión base log-uniforme, tamaños de
librería log-normales, genes causales preferentemente muy expresados y seis
escenarios de respuesta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from diffknock.core.errors import ConfigError, DataError, ShapeError
from diffknock.core.rng import derive_rng
from diffknock.models.matrix import FeatureMatrix, as_array, default_names
from diffknock.models.schemas import SimConfig
from diffknock.utils.logger import get_logger

logger = get_logger("Simgen")

MULTISCALE_FREQUENCIES = (0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class ScenarioTruth:
    causal: List[int]
    beta_unit: np.ndarray
    library_sizes: np.ndarray
    baseline_log: np.ndarray
    rho: List[float] = field(default_factory=list)
    blocks: List[int] = field(default_factory=list)

    def coefficients(self, amplitude: float) -> np.ndarray:
        """β = A·b con b ~ N(0, 1) en los genes causales y 0 fuera."""
        return float(amplitude) * self.beta_unit

    @property
    def second_order(self) -> List[int]:
        return self.causal[:2]

    def to_dict(self, names: Optional[List[str]] = None) -> Dict[str, object]:
        return {
            "causal": list(self.causal),
            "causal_names": [names[j] for j in self.causal] if names else [],
            "beta_unit": self.beta_unit,
            "rho": list(self.rho),
            "blocks": list(self.blocks),
            "baseline_log": self.baseline_log,
            "library_sizes": self.library_sizes,
        }


@dataclass
class Simulation:
    tpm: FeatureMatrix
    features: FeatureMatrix
    y: np.ndarray
    truth: ScenarioTruth
    scenario: str
    amplitude: float


def log_standardize(tpm: np.ndarray) -> np.ndarray:
    """log(1 + TPM) estandarizado por columna (sd poblacional)."""
    logged = np.log1p(tpm)
    sd = logged.std(axis=0)
    if np.any(sd == 0.0):
        raise DataError(f"columnas constantes tras log1p: {np.flatnonzero(sd == 0.0).tolist()}", stage="simulate")
    return (logged - logged.mean(axis=0)) / sd


def block_latent(n: int, blocks: List[int], rng: np.random.Generator, rho_range=(0.4, 0.8),
                 rho_fixed: Optional[float] = None) -> tuple[np.ndarray, List[float]]:
    """Gaussiana con covarianza por bloques (1 − ρ)I + ρ11ᵀ (un ρ por bloque)."""
    parts = []
    rhos = []
    for size in blocks:
        rho = float(rho_fixed) if rho_fixed is not None else float(rng.uniform(*rho_range))
        shared = rng.standard_normal((n, 1))
        own = rng.standard_normal((n, size))
        parts.append(np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own)
        rhos.append(rho)
    return np.hstack(parts), rhos


def generate_expression(cfg: SimConfig, seed: Optional[int] = None) -> tuple[FeatureMatrix, ScenarioTruth]:
    seed = cfg.seed if seed is None else int(seed)
    blocks = cfg.resolved_blocks()
    if sum(blocks) != cfg.p or cfg.s > cfg.p:
        raise ConfigError(f"configuración inviable: bloques={blocks} p={cfg.p} s={cfg.s}", stage="simulate")

    latent, rhos = block_latent(cfg.n, blocks, derive_rng(seed, "latent"), cfg.rho_range, cfg.rho_fixed)
    baseline = derive_rng(seed, "baseline").uniform(*cfg.baseline_range, size=cfg.p)
    library = derive_rng(seed, "library").lognormal(mean=np.log(1e6), sigma=cfg.library_log_sd, size=cfg.n)

    expression = np.exp(baseline[None, :] + latent)
    share = expression / expression.sum(axis=1, keepdims=True)
    if cfg.count_noise:
        counts = derive_rng(seed, "counts").poisson(library[:, None] * share)
        tpm = counts * 1e6 / library[:, None]
    else:
        # escalar a L_i y volver a 10⁶/L_i deja la proporción por muestra
        tpm = share * 1e6

    mean_expr = tpm.mean(axis=0)
    weights = np.exp(mean_expr / mean_expr.max())
    causal_rng = derive_rng(seed, "causal")
    causal = sorted(int(j) for j in causal_rng.choice(cfg.p, size=cfg.s, replace=False, p=weights / weights.sum()))
    beta_unit = np.zeros(cfg.p)
    beta_unit[causal] = derive_rng(seed, "beta").standard_normal(len(causal))

    truth = ScenarioTruth(causal, beta_unit, library, baseline, rhos, blocks)
    logger.debug("[Simulate] n=%d p=%d s=%d causales=%s", cfg.n, cfg.p, cfg.s, causal)
    return FeatureMatrix(tpm, default_names(cfg.p, "gene")), truth


# ─── Escenarios ──────────────────────────────────────────

ScenarioFn = Callable[[np.ndarray, np.ndarray, ScenarioTruth, SimConfig, int], np.ndarray]


def _linear(y_base, X, truth, cfg, seed):
    return y_base


def _polynomial(y_base, X, truth, cfg, seed):
    extra = sum((0.2 * X[:, j] ** 2 for j in truth.second_order), np.zeros_like(y_base))
    return y_base + 0.3 * y_base ** 2 + 0.1 * y_base ** 3 + extra


def _mixed(y_base, X, truth, cfg, seed):
    return (
        0.3 * y_base
        + 0.3 * np.tanh(y_base)
        + 0.2 * (y_base ** 2 - np.mean(y_base ** 2))
        + 0.2 * (np.exp(np.clip(0.3 * y_base, -5.0, 5.0)) - 1.0)
    )


_EXPANSIONS = (
    lambda c: np.exp(-np.abs(c)),
    lambda c: c ** 2 * np.sign(c),
    lambda c: np.sin(np.pi * c),
)


def _bottleneck(y_base, X, truth, cfg, seed):
    c = np.tanh(y_base / 2.0)
    out = c + 0.2 * (c - y_base) ** 2
    for k, j in enumerate(truth.causal):
        out = out + 0.3 * _EXPANSIONS[k % len(_EXPANSIONS)](c) * X[:, j]
    return out


def _multiscale(y_base, X, truth, cfg, seed):
    envelope = 1.0 + 0.5 * np.tanh(y_base / 2.0)
    omegas = [MULTISCALE_FREQUENCIES[k % len(MULTISCALE_FREQUENCIES)] for k in range(len(truth.causal))]
    waves = [np.sin(w * X[:, j]) for w, j in zip(omegas, truth.causal)]
    out = y_base * envelope
    for w, j, wave in zip(omegas, truth.causal, waves):
        out = out + cfg.multiscale_main * wave + cfg.multiscale_harmonic * np.sin(2.0 * w * X[:, j])
    for a in range(len(waves)):
        for b in range(a + 1, len(waves)):
            out = out + cfg.multiscale_cross * waves[a] * waves[b]
    return out


def _network(y_base, X, truth, cfg, seed):
    g1 = np.tanh(y_base)
    g2 = g1 * np.exp(-np.abs(g1) / 2.0)
    g3 = np.sign(g2) * np.sqrt(np.abs(g2))
    weights = derive_rng(seed, "network-weights").normal(0.0, cfg.network_weight_sd, size=(3, len(truth.causal)))
    out = 0.2 * g1 * g3
    for layer, g in enumerate((g1, g2, g3)):
        for k, j in enumerate(truth.causal):
            out = out + weights[layer, k] * g * X[:, j]
    return out


SCENARIOS: Dict[str, ScenarioFn] = {
    "linear": _linear,
    "polynomial": _polynomial,
    "mixed": _mixed,
    "bottleneck": _bottleneck,
    "multiscale": _multiscale,
    "network": _network,
}


def standardize_response(y: np.ndarray) -> np.ndarray:
    sd = float(np.std(y))
    if sd == 0.0:
        raise DataError("respuesta constante: no se puede estandarizar", stage="simulate")
    centered = y - np.mean(y)
    return centered / sd


def generate_outcome(scenario: str, X, truth: ScenarioTruth, amplitude: float, seed: int,
                     cfg: Optional[SimConfig] = None, eps: Optional[np.ndarray] = None) -> np.ndarray:
    """
    y = escenario(Xβ) + ε, estandarizada. `X` son las características ya
    estandarizadas (log1p TPM). `eps` permite fijar el ruido (p. ej. a cero).
    """
    fn = SCENARIOS.get(scenario)
    if fn is None:
        raise ConfigError(f"escenario desconocido '{scenario}'; disponibles: {sorted(SCENARIOS)}", stage="simulate")
    cfg = cfg or SimConfig()
    x = as_array(X)
    if x.shape[1] != truth.beta_unit.size:
        raise ShapeError(f"X tiene {x.shape[1]} columnas y β {truth.beta_unit.size}", stage="simulate")
    y_base = x @ truth.coefficients(amplitude)
    signal = fn(y_base, x, truth, cfg, int(seed))
    if eps is None:
        eps = cfg.noise_sd * derive_rng(seed, "outcome-noise").standard_normal(x.shape[0])
    return standardize_response(signal + np.asarray(eps, dtype=np.float64))


def simulate(cfg: SimConfig, seed: Optional[int] = None, scenario: Optional[str] = None,
             amplitude: Optional[float] = None) -> Simulation:
    seed = cfg.seed if seed is None else int(seed)
    scenario = scenario or cfg.scenario
    amplitude = cfg.amplitude if amplitude is None else float(amplitude)
    tpm, truth = generate_expression(cfg, seed)
    features = FeatureMatrix(log_standardize(tpm.values), list(tpm.names))
    y = generate_outcome(scenario, features, truth, amplitude, seed, cfg)
    logger.info("[Simulate] escenario=%s A=%.3g n=%d p=%d causales=%s", scenario, amplitude, cfg.n, cfg.p, truth.causal)
    return Simulation(tpm, features, y, truth, scenario, amplitude)
