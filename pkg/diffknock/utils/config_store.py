"""
DiffKnock — Config Store
Resolución de configuración: DEFAULTS ← preset ← archivo YAML/JSON ← overrides
`clave.anidada=valor`. El resultado se valida como `PipelineConfig`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml
from pydantic import ValidationError

from diffknock.core.errors import ConfigError
from diffknock.models.schemas import PipelineConfig
from diffknock.utils.logger import get_logger

logger = get_logger("ConfigStore")

# Valores por defecto (hiperparámetros de referencia del método)
DEFAULTS: Dict[str, Any] = {
    "generator": "diffusion",
    "statistic": "gradient",
    "q": 0.2,
    "seed": 0,
    "output_dir": "runs/default",
    "normalization": {"log1p": True, "standardize": True},
    "diffusion": {
        "layers": 6,
        "d_model": 256,
        "heads": 8,
        "timesteps": 1000,
        "schedule": "cosine",
        "schedule_offset": 0.008,
        "epochs": 300,
        "batch_size": 64,
        "lr": 1e-4,
        "clip_norm": 1.0,
    },
    "autoencoder": {"bottleneck": 3, "epochs": 300},
    "filter": {"hidden": [50, 20], "dropout": 0.1, "epochs": 1000, "batch_size": 128, "lr": 1e-3},
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "reference": {},
    "desk": {
        "diffusion": {"layers": 3, "d_model": 64, "heads": 4, "timesteps": 250, "epochs": 150},
        "autoencoder": {"epochs": 150},
        "filter": {"epochs": 300},
    },
}


def deep_merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def update(data: Dict[str, Any], key: str, value: Any) -> Dict[str, Any]:
    """Actualiza un valor usando dot notation (crea los niveles intermedios)."""
    keys = [k for k in str(key).split(".") if k]
    if not keys:
        raise ConfigError(f"clave de override vacía: '{key}'")
    obj = data
    for k in keys[:-1]:
        if not isinstance(obj.get(k), dict):
            obj[k] = {}
        obj = obj[k]
    obj[keys[-1]] = value
    return data


def parse_override(raw: str) -> tuple[str, Any]:
    """'diffusion.epochs=20' -> ('diffusion.epochs', 20). El valor se interpreta como YAML."""
    if "=" not in raw:
        raise ConfigError(f"override inválido (se esperaba clave=valor): '{raw}'")
    key, text = raw.split("=", 1)
    try:
        value = yaml.safe_load(text) if text.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"valor de override ilegible en '{raw}': {e}") from e
    return key.strip(), value


def read_config_file(path: str | Path) -> Dict[str, Any]:
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"archivo de configuración no encontrado: {file}")
    try:
        data = yaml.safe_load(file.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML/JSON inválido en {file}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"la configuración de {file} debe ser un mapeo, es {type(data).__name__}")
    return data


def resolve_raw(path: Optional[str | Path] = None, preset: Optional[str] = None,
                overrides: Iterable[str] = ()) -> Dict[str, Any]:
    data = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"preset desconocido '{preset}'; disponibles: {sorted(PRESETS)}")
        data = deep_merge(data, PRESETS[preset])
    if path:
        data = deep_merge(data, read_config_file(path))
    for raw in overrides or ():
        key, value = parse_override(raw)
        update(data, key, value)
    return data


def validate_config(data: Dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        fields = "; ".join(
            f"{'.'.join(str(p) for p in err.get('loc', ())) or '<raíz>'}: {err.get('msg')}" for err in e.errors()
        )
        raise ConfigError(f"configuración inválida: {fields}", stage="config") from e


def load_config(path: Optional[str | Path] = None, preset: Optional[str] = None,
                overrides: Iterable[str] = ()) -> PipelineConfig:
    """Carga y valida la configuración completa de una ejecución."""
    overrides = list(overrides or ())
    data = resolve_raw(path, preset, overrides)
    cfg = validate_config(data)
    logger.debug("[Config] preset=%s archivo=%s overrides=%d", preset, path, len(overrides))
    return cfg


def config_snapshot(cfg: PipelineConfig) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(config_snapshot(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_config(cfg: PipelineConfig, path: str | Path) -> Path:
    file = Path(path)
    file.parent.mkdir(parents=True, exist_ok=True)
    file.write_text(yaml.safe_dump(config_snapshot(cfg), sort_keys=True, allow_unicode=True), encoding="utf-8")
    return file


def worker_count(explicit: Optional[int] = None) -> int:
    """Workers desde --workers o DIFFKNOCK_WORKERS (por defecto 1)."""
    if explicit is not None:
        if explicit < 1:
            raise ConfigError(f"--workers debe ser >= 1: {explicit}")
        return int(explicit)
    raw = str(os.getenv("DIFFKNOCK_WORKERS") or "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"DIFFKNOCK_WORKERS no es un entero: '{raw}'") from e
    if value < 1:
        raise ConfigError(f"DIFFKNOCK_WORKERS debe ser >= 1: {value}")
    return value
