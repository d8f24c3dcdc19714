"""
DiffKnock — Errores de dominio
Cada error lleva una etiqueta de etapa opcional y el código de salida de la CLI.
"""

from __future__ import annotations

from typing import Optional


class DiffKnockError(Exception):
    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = str(message)
        self.stage = stage

    def with_stage(self, stage: str) -> "DiffKnockError":
        if not self.stage:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class ConfigError(DiffKnockError):
    exit_code = 2


class DataError(DiffKnockError):
    exit_code = 3


class ShapeError(DataError):
    pass


class NumericalError(DiffKnockError):
    exit_code = 4


class GraphError(DiffKnockError):
    """Uso inválido del grafo de cómputo (backward repetido, pérdida no escalar...)."""
