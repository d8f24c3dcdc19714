"""
DiffKnock — Runtime paths
Centraliza rutas de datos en runtime (logs, salidas por defecto).
"""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Any, Dict


def _project_root_from_source() -> Path:
    # diffknock/utils/paths.py -> utils -> diffknock -> repo root
    return Path(__file__).resolve().parents[2]


PROJECT_ROOT = _project_root_from_source()


def _data_dir() -> Path:
    raw = str(os.getenv("DIFFKNOCK_HOME") or "").strip()
    return Path(raw).expanduser().resolve() if raw else Path.cwd()


DATA_DIR = _data_dir()
LOGS_DIR = DATA_DIR / "logs"
RUNS_DIR = DATA_DIR / "runs"
DOCS_DIR = PROJECT_ROOT / "docs"


def ensure_runtime_dirs() -> None:
    LOGS_DIR.mkdir(parents=True, exist_ok=True)
    RUNS_DIR.mkdir(parents=True, exist_ok=True)


def runtime_paths_info() -> Dict[str, Any]:
    return {
        "projectRoot": str(PROJECT_ROOT),
        "dataDir": str(DATA_DIR),
        "logsDir": str(LOGS_DIR),
        "runsDir": str(RUNS_DIR),
        "docsDir": str(DOCS_DIR),
        "pythonExecutable": str(Path(sys.executable).resolve()),
    }
