"""
DiffKnock — Optimizadores
AdamW con recorte de norma global y tasa de aprendizaje con recocido coseno.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from diffknock.core.errors import NumericalError, ShapeError
from diffknock.core.tensor import Tensor

NamedParams = Sequence[Tuple[str, Tensor]]


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: Optional[float] = 1.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    last_grad_norm: float = 0.0


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], clip_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """Reescala todos los gradientes si la norma global supera `clip_norm`."""
    norm = global_norm(grads)
    if clip_norm is None or not math.isfinite(norm) or norm <= clip_norm:
        return dict(grads), norm
    scale = clip_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def optimizer_step(state: OptimizerState, params: NamedParams, grads: Mapping[str, np.ndarray]) -> List[Tensor]:
    """
    Un paso de AdamW: recorte global, momentos con corrección de sesgo y
    decaimiento de pesos desacoplado. Reasigna `p.data` (los arrays anteriores
    no se mutan).
    """
    for name, p in params:
        if name not in grads:
            raise ShapeError(f"falta el gradiente de '{name}'")
        if grads[name].shape != p.shape:
            raise ShapeError(f"gradiente de '{name}' con forma {grads[name].shape}, parámetro {p.shape}")

    clipped, norm = clip_gradients({name: grads[name] for name, _ in params}, state.clip_norm)
    for name, g in clipped.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"gradiente no finito en '{name}' tras el recorte (norma={norm})", stage="optimizer")

    state.step += 1
    state.last_grad_norm = norm
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, p in params:
        g = clipped[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = state.beta1 * m + (1.0 - state.beta1) * g if m is not None else (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g if v is not None else (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        data = p.data
        if state.weight_decay:
            data = data - state.lr * state.weight_decay * data
        p.data = data - state.lr * update
    return [p for _, p in params]


def cosine_annealed_lr(base_lr: float, epoch: int, total_epochs: int, floor_ratio: float = 0.01) -> float:
    """Recocido coseno de `base_lr` a `floor_ratio·base_lr` a lo largo del presupuesto de épocas."""
    if total_epochs <= 1:
        return base_lr
    progress = min(max(epoch / (total_epochs - 1), 0.0), 1.0)
    floor = base_lr * floor_ratio
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Envoltorio con estado sobre `optimizer_step` para un conjunto fijo de parámetros."""

    def __init__(self, params: NamedParams, lr: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip_norm: Optional[float] = 1.0):
        self.params = list(params)
        self.base_lr = lr
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay, clip_norm=clip_norm)

    def set_lr(self, lr: float) -> None:
        self.state.lr = lr

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        """Recibe el mapa de `backward()` (tensor -> gradiente)."""
        named = {name: grads.get(p, np.zeros_like(p.data)) for name, p in self.params}
        optimizer_step(self.state, self.params, named)
