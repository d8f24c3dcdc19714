"""
DiffKnock — Capas
Conjunto mínimo de capas que usan el denoiser transformer, el autoencoder y la
red de filtros por pares. Todas operan sobre `Tensor` y registran su salida en
el grafo de cómputo.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from diffknock.core import tensor as T
from diffknock.core.errors import ConfigError, ShapeError
from diffknock.core.tensor import Tensor, parameter

ACTIVATIONS = ("relu", "gelu", "elu", "tanh")
LAYER_KINDS = (
    "linear",
    "layer-norm",
    "conditional-layer-norm",
    "dropout",
    "multi-head-self-attention",
    "pair-filter",
) + ACTIVATIONS


class Module:
    """Base: descubre parámetros y submódulos recorriendo los atributos en orden de asignación."""

    kind = "module"

    def __init__(self) -> None:
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in self.__dict__.items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def children(self) -> Iterator["Module"]:
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (item for item in value if isinstance(item, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state_dict incompatible: faltan={missing} sobran={unexpected}")
        for name, p in own.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ShapeError(f"parámetro '{name}': forma {values.shape}, se esperaba {p.shape}")
            p.data = values.copy()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def check_input(self, x: Tensor, aux: Optional[Tensor]) -> None:
        return None

    def forward(self, x: Tensor, aux: Optional[Tensor] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, aux: Optional[Tensor] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
        return layer_forward(self, x, aux, rng=rng)


def _check_last_dim(layer: Module, x: Tensor, expected: int) -> None:
    if x.ndim == 0 or x.shape[-1] != expected:
        raise ShapeError(f"{layer.kind}: última dimensión {x.shape}, se esperaba {expected}")


class Linear(Module):
    """y = x @ W + b con W de forma (in, out)."""

    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = parameter(rng.uniform(-bound, bound, size=(out_features,))) if bias else None

    def check_input(self, x: Tensor, aux: Optional[Tensor]) -> None:
        _check_last_dim(self, x, self.in_features)

    def forward(self, x, aux=None, rng=None):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    kind = "layer-norm"

    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = parameter(np.ones(dim)) if affine else None
        self.beta = parameter(np.zeros(dim)) if affine else None

    def check_input(self, x: Tensor, aux: Optional[Tensor]) -> None:
        _check_last_dim(self, x, self.dim)

    def forward(self, x, aux=None, rng=None):
        out = T.layer_norm(x, self.eps)
        if self.gamma is None:
            return out
        return out * self.gamma + self.beta


class ConditionalLayerNorm(Module):
    """
    γ(t) ⊙ LN(x) + β(t), con (γ, β) proyectados desde el embedding temporal.
    La proyección arranca en γ = 1, β = 0 (más un ruido pequeño en los pesos).
    """

    kind = "conditional-layer-norm"

    def __init__(self, dim: int, cond_dim: int, rng: np.random.Generator, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.cond_dim = cond_dim
        self.eps = eps
        self.proj_weight = parameter(0.02 * rng.standard_normal((cond_dim, 2 * dim)))
        self.proj_bias = parameter(np.concatenate([np.ones(dim), np.zeros(dim)]))

    def check_input(self, x: Tensor, aux: Optional[Tensor]) -> None:
        _check_last_dim(self, x, self.dim)
        if aux is None:
            raise ShapeError("conditional-layer-norm requiere el embedding temporal como aux")
        if aux.ndim != 2 or aux.shape[1] != self.cond_dim or aux.shape[0] != x.shape[0]:
            raise ShapeError(f"conditional-layer-norm: aux {aux.shape} incompatible con x {x.shape}")

    def forward(self, x, aux=None, rng=None):
        mod = aux @ self.proj_weight + self.proj_bias
        batch_shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (self.dim,)
        gamma = mod[:, : self.dim].reshape(batch_shape)
        beta = mod[:, self.dim :].reshape(batch_shape)
        return gamma * T.layer_norm(x, self.eps) + beta


class MultiHeadSelfAttention(Module):
    """Atención multi-cabeza sobre tokens (B, tokens, d)."""

    kind = "multi-head-self-attention"

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if heads <= 0 or dim % heads:
            raise ConfigError(f"d={dim} no es divisible entre h={heads}")
        self.dim = dim
        self.heads = heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def check_input(self, x: Tensor, aux: Optional[Tensor]) -> None:
        if x.ndim != 3:
            raise ShapeError(f"atención espera (B, tokens, d), recibido {x.shape}")
        _check_last_dim(self, x, self.dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x, aux=None, rng=None):
        b, n, _ = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        weights = T.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, self.dim)
        return self.out(mixed)


class Dropout(Module):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"tasa de dropout fuera de [0, 1): {rate}")
        self.rate = float(rate)

    def forward(self, x, aux=None, rng=None):
        return T.dropout(x, self.rate, rng, self.training)


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ConfigError(f"activación desconocida: {kind}")
        self.kind = kind

    def forward(self, x, aux=None, rng=None):
        if self.kind == "relu":
            return T.relu(x)
        if self.kind == "gelu":
            return T.gelu(x)
        if self.kind == "elu":
            return T.elu(x)
        return T.tanh(x)


def pair_filter(x: Tensor, xk: Tensor, z: Tensor, zk: Tensor) -> Tensor:
    """
    f_j = (z_j·x_j + z̃_j·x̃_j) / (|z_j| + |z̃_j|).
    Con (z_j, z̃_j) = (0, 0) la salida es 0 y ambos gradientes son 0.
    """
    s = np.abs(z.data) + np.abs(zk.data)
    live = s > 0.0
    safe = np.where(live, s, 1.0)
    a = np.where(live, z.data / safe, 0.0)
    b = np.where(live, zk.data / safe, 0.0)
    out = a * x.data + b * xk.data
    inv_sq = np.where(live, 1.0 / (safe * safe), 0.0)

    def backward(g: np.ndarray):
        # ∂a/∂z = |z̃|/s², ∂a/∂z̃ = -z·sign(z̃)/s², ∂b/∂z = -z̃·sign(z)/s², ∂b/∂z̃ = |z|/s²
        gx_sum = (g * x.data).reshape(-1, x.shape[-1]).sum(axis=0)
        gxk_sum = (g * xk.data).reshape(-1, xk.shape[-1]).sum(axis=0)
        dz = gx_sum * np.abs(zk.data) * inv_sq - gxk_sum * zk.data * np.sign(z.data) * inv_sq
        dzk = gxk_sum * np.abs(z.data) * inv_sq - gx_sum * z.data * np.sign(zk.data) * inv_sq
        return g * a, g * b, dz, dzk

    return Tensor._node(out, (x, xk, z, zk), backward, "pair_filter")


class PairFilter(Module):
    """Capa de filtros por pares: una pareja (z_j, z̃_j) por característica."""

    kind = "pair-filter"

    def __init__(self, p: int, rng: np.random.Generator, init_low: float = 0.9, init_high: float = 1.1):
        super().__init__()
        self.p = p
        self.z = parameter(rng.uniform(init_low, init_high, size=p))
        self.z_knockoff = parameter(rng.uniform(init_low, init_high, size=p))

    def check_input(self, x: Tensor, aux: Optional[Tensor]) -> None:
        _check_last_dim(self, x, self.p)
        if aux is None or aux.shape != x.shape:
            raise ShapeError(f"pair-filter: knockoffs {None if aux is None else aux.shape} vs originales {x.shape}")

    def normalized_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        s = np.abs(self.z.data) + np.abs(self.z_knockoff.data)
        safe = np.where(s > 0.0, s, 1.0)
        return np.where(s > 0.0, self.z.data / safe, 0.0), np.where(s > 0.0, self.z_knockoff.data / safe, 0.0)

    def forward(self, x, aux=None, rng=None):
        return pair_filter(x, aux, self.z, self.z_knockoff)


@dataclass
class LayerSpec:
    """Descriptor serializable de una capa: tipo + dimensiones."""

    kind: str
    dims: Dict[str, float] = field(default_factory=dict)


def build_layer(spec: LayerSpec, rng: Optional[np.random.Generator] = None) -> Module:
    d = spec.dims
    if spec.kind not in LAYER_KINDS:
        raise ConfigError(f"tipo de capa desconocido: {spec.kind}")
    if spec.kind in ACTIVATIONS:
        return Activation(spec.kind)
    if spec.kind == "dropout":
        return Dropout(float(d.get("rate", 0.0)))
    if spec.kind == "layer-norm":
        return LayerNorm(int(d["dim"]), affine=bool(d.get("affine", True)))
    if rng is None:
        raise ConfigError(f"la capa '{spec.kind}' necesita un generador para inicializarse")
    if spec.kind == "linear":
        return Linear(int(d["in"]), int(d["out"]), rng)
    if spec.kind == "conditional-layer-norm":
        return ConditionalLayerNorm(int(d["dim"]), int(d["cond_dim"]), rng)
    if spec.kind == "multi-head-self-attention":
        return MultiHeadSelfAttention(int(d["dim"]), int(d["heads"]), rng)
    return PairFilter(int(d["p"]), rng)


def layer_forward(
    layer: Module,
    x: Tensor,
    aux: Optional[Tensor] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Aplica una capa validando formas; el modo train/eval lo decide `layer.training`."""
    x = T.as_tensor(x)
    aux = T.as_tensor(aux) if aux is not None else None
    layer.check_input(x, aux)
    return layer.forward(x, aux, rng)
