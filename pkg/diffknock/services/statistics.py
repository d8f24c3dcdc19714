"""
DiffKnock — Estadísticos knockoff
Red con capa de filtros por pares sobre [X, X̃], estadístico por gradiente
(sensibilidad de la pérdida) y estadístico por filtros (producto de pesos).
Ambos son antisimétricos: intercambiar (x_j, z_j) con (x̃_j, z̃_j) cambia el
signo de W_j y deja el resto intacto.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from diffknock.core import tensor as T
from diffknock.core.errors import ConfigError, DataError, NumericalError, ShapeError
from diffknock.core.layers import Activation, Dropout, LayerNorm, Linear, Module, PairFilter
from diffknock.core.optim import AdamW, cosine_annealed_lr
from diffknock.core.rng import derive_rng
from diffknock.core.tensor import Tensor, no_grad
from diffknock.models.matrix import as_array, check_same_shape
from diffknock.models.schemas import FilterTrainConfig
from diffknock.services.selection import knockoff_plus_select
from diffknock.utils.io import read_json, sha256_array, write_json, write_table_csv
from diffknock.utils.logger import get_logger

logger = get_logger("Statistics")


class FilterNetwork(Module):
    """
    Filtros por pares -> [LayerNorm -> Linear -> ReLU -> Dropout]* -> Linear(1).
    Cada capa oculta lee la salida anterior normalizada, incluida la de los filtros.
    """

    kind = "filter-network"

    def __init__(self, p: int, hidden: Sequence[int], dropout: float, rng: np.random.Generator,
                 loss_kind: str = "mse", filter_init: Sequence[float] = (0.9, 1.1)):
        super().__init__()
        self.p = p
        self.loss_kind = loss_kind
        self.loss_trace: List[float] = []
        self.pair = PairFilter(p, rng, float(filter_init[0]), float(filter_init[1]))
        self.hidden: List[Module] = []
        width = p
        for size in hidden:
            self.hidden.extend([LayerNorm(width), Linear(width, int(size), rng), Activation("relu"), Dropout(dropout)])
            width = int(size)
        self.head = Linear(width, 1, rng)

    def linear_layers(self) -> List[Linear]:
        return [layer for layer in self.hidden if isinstance(layer, Linear)] + [self.head]

    def forward(self, x, aux=None, rng=None):
        h = self.pair(x, aux)
        for layer in self.hidden:
            h = layer(h, rng=rng)
        out = self.head(h)
        return out.reshape(x.shape[0])

    def params_hash(self) -> str:
        digest = hashlib.sha256()
        for name, values in self.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
        return digest.hexdigest()


@dataclass
class KnockoffStatistics:
    W: np.ndarray
    method: str  # gradient | filter
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 1:
            raise ShapeError(f"W debe ser un vector, forma {self.W.shape}")
        if not np.isfinite(self.W).all():
            raise NumericalError(f"estadísticos {self.method} no finitos", stage="statistics")

    @property
    def p(self) -> int:
        return int(self.W.size)


def resolve_loss_kind(y: np.ndarray, requested: str = "auto") -> str:
    if requested != "auto":
        return requested
    values = np.unique(y)
    return "bce" if values.size <= 2 and np.isin(values, (0.0, 1.0)).all() else "mse"


def per_sample_loss(pred: Tensor, y: np.ndarray, loss_kind: str) -> Tensor:
    if loss_kind == "bce":
        return T.bce_with_logits(pred, y)
    diff = pred - Tensor(y)
    return diff * diff


def _check_inputs(X, Xk, y: Optional[np.ndarray] = None):
    x = as_array(X)
    xk = as_array(Xk)
    check_same_shape(x, xk, "X y X̃")
    if x.ndim != 2:
        raise ShapeError(f"X debe ser 2D, forma {x.shape}")
    if y is not None:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != x.shape[0]:
            raise ShapeError(f"y tiene {y.size} valores para n={x.shape[0]}")
    return x, xk, y


def filter_forward(net: FilterNetwork, x_row, xk_row) -> float:
    """Predicción escalar (escala del enlace: logit para BCE) para una fila."""
    net.eval()
    with no_grad():
        x = np.asarray(x_row, dtype=np.float64).reshape(1, -1)
        xk = np.asarray(xk_row, dtype=np.float64).reshape(1, -1)
        return float(net(Tensor(x), Tensor(xk)).data[0])


def train_filter_network(X, Xk, y, cfg: Optional[FilterTrainConfig] = None, seed: int = 0) -> FilterNetwork:
    cfg = cfg or FilterTrainConfig()
    x, xk, y = _check_inputs(X, Xk, y)
    n, p = x.shape
    if n == 0:
        raise DataError("sin muestras para entrenar la red de filtros", stage="statistics")
    loss_kind = resolve_loss_kind(y, cfg.loss)
    if loss_kind == "mse" and float(np.var(y)) == 0.0:
        raise DataError("la respuesta tiene varianza cero; la pérdida cuadrática no es informativa", stage="statistics")
    if loss_kind == "bce" and not np.isin(y, (0.0, 1.0)).all():
        raise DataError("la pérdida BCE requiere etiquetas en {0, 1}", stage="statistics")

    net = FilterNetwork(p, cfg.hidden, cfg.dropout, derive_rng(seed, "init", "filter"), loss_kind, cfg.filter_init)
    opt = AdamW(list(net.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    batch_rng = derive_rng(seed, "batches", "filter")
    dropout_rng = derive_rng(seed, "dropout", "filter")
    started = time.perf_counter()
    net.train()
    for epoch in range(cfg.epochs):
        opt.set_lr(cosine_annealed_lr(cfg.lr, epoch, cfg.epochs))
        order = batch_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            try:
                pred = net(Tensor(x[rows]), Tensor(xk[rows]), rng=dropout_rng)
                loss = per_sample_loss(pred, y[rows], loss_kind).mean()
                opt.step(T.backward(loss))
            except NumericalError as e:
                raise NumericalError(f"época {epoch + 1}: {e.message}", stage="statistics") from e
            total += loss.item() * rows.size
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise NumericalError(f"pérdida no finita en la época {epoch + 1}", stage="statistics")
        net.loss_trace.append(epoch_loss)
        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            logger.info("[Stats] red de filtros época %d/%d loss=%.6f", epoch + 1, cfg.epochs, epoch_loss)
    net.eval()
    logger.info("[Stats] red de filtros (%s) entrenada en %.1fs", loss_kind, time.perf_counter() - started)
    return net


def _shard_gradients(net: FilterNetwork, x: np.ndarray, xk: np.ndarray, y: np.ndarray):
    xt = Tensor(x, requires_grad=True)
    xkt = Tensor(xk, requires_grad=True)
    loss = per_sample_loss(net(xt, xkt), y, net.loss_kind).sum()
    grads = T.backward(loss, leaves=[xt, xkt])
    return np.abs(grads[xt]), np.abs(grads[xkt])


def gradient_statistics(net: FilterNetwork, X, Xk, y, shard_rows: Optional[int] = None,
                        workers: int = 1) -> KnockoffStatistics:
    """W_j = media_i |∂L_i/∂x_ij| − media_i |∂L_i/∂x̃_ij|, en modo evaluación."""
    x, xk, y = _check_inputs(X, Xk, y)
    if x.shape[1] != net.p:
        raise ShapeError(f"X tiene {x.shape[1]} columnas; la red espera {net.p}", stage="statistics")
    net.eval()
    n = x.shape[0]
    step = shard_rows or n
    shards = [slice(start, min(start + step, n)) for start in range(0, n, step)]
    run = lambda sl: _shard_gradients(net, x[sl], xk[sl], y[sl])  # noqa: E731
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, shards))
    else:
        parts = [run(sl) for sl in shards]
    gx = np.concatenate([a for a, _ in parts], axis=0)
    gxk = np.concatenate([b for _, b in parts], axis=0)
    if not (np.isfinite(gx).all() and np.isfinite(gxk).all()):
        raise NumericalError("gradientes no finitos en el estadístico por gradiente", stage="statistics")
    W = gx.mean(axis=0) - gxk.mean(axis=0)
    return KnockoffStatistics(W, "gradient", {"model_hash": net.params_hash(), "data_hash": sha256_array(np.hstack([x, xk]))})


def effective_weights(net: FilterNetwork) -> np.ndarray:
    """Producto de las matrices de las capas lineales (sin normalizaciones ni activaciones) -> vector p."""
    w = net.linear_layers()[0].weight.data
    for layer in net.linear_layers()[1:]:
        w = w @ layer.weight.data
    return w.reshape(-1)


def filter_statistics(net: Optional[FilterNetwork]) -> KnockoffStatistics:
    """W_j = (w_eff_j · z_j)² − (w_eff_j · z̃_j)² con los filtros normalizados."""
    if net is None:
        raise ConfigError("no hay red de filtros entrenada", stage="statistics")
    w_eff = effective_weights(net)
    a, b = net.pair.normalized_weights()
    W = (w_eff * a) ** 2 - (w_eff * b) ** 2
    return KnockoffStatistics(W, "filter", {"model_hash": net.params_hash()})


def swap_pair(net: FilterNetwork, j: int) -> None:
    """Intercambia (z_j, z̃_j) en la capa de filtros."""
    z = net.pair.z.data.copy()
    zk = net.pair.z_knockoff.data.copy()
    z[j], zk[j] = zk[j], z[j]
    net.pair.z.data = z
    net.pair.z_knockoff.data = zk


def predict(net: FilterNetwork, X, Xk) -> np.ndarray:
    """ŷ en modo evaluación; con BCE devuelve probabilidades."""
    x, xk, _ = _check_inputs(X, Xk)
    net.eval()
    with no_grad():
        out = net(Tensor(x), Tensor(xk))
        return T.sigmoid(out).data if net.loss_kind == "bce" else out.data


def predictive_score(net: FilterNetwork, X, Xk, y) -> Dict[str, float]:
    """R² para pérdida cuadrática, exactitud para BCE."""
    _, _, y = _check_inputs(X, Xk, y)
    pred = predict(net, X, Xk)
    if net.loss_kind == "bce":
        return {"metric": "accuracy", "value": float(np.mean((pred >= 0.5) == (y >= 0.5)))}
    total = float(np.sum((y - y.mean()) ** 2))
    resid = float(np.sum((y - pred) ** 2))
    return {"metric": "r2", "value": 1.0 - resid / total if total > 0 else 0.0}


def statistics_agreement(w_gradient: KnockoffStatistics, w_filter: KnockoffStatistics, q: float) -> Dict[str, float]:
    """Correlación de Spearman entre ambos W y Jaccard de sus selecciones al nivel q."""
    if w_gradient.p != w_filter.p:
        raise ShapeError(f"W de longitudes distintas: {w_gradient.p} vs {w_filter.p}")
    rho = spearmanr(w_gradient.W, w_filter.W).statistic if w_gradient.p > 1 else float("nan")
    sel_a = set(knockoff_plus_select(w_gradient, q).selected)
    sel_b = set(knockoff_plus_select(w_filter, q).selected)
    union = sel_a | sel_b
    jaccard = len(sel_a & sel_b) / len(union) if union else 1.0
    return {"spearman": float(rho) if np.isfinite(rho) else 0.0, "jaccard": float(jaccard),
            "n_gradient": len(sel_a), "n_filter": len(sel_b)}


def statistics_frame(stats: KnockoffStatistics, names: Sequence[str]) -> pd.DataFrame:
    if len(names) != stats.p:
        raise ShapeError(f"{len(names)} nombres para {stats.p} estadísticos")
    return pd.DataFrame({"feature": list(names), "W": stats.W, "method": stats.method})


def export_statistics(stats: KnockoffStatistics, names: Sequence[str], path: str | Path) -> Path:
    """CSV (feature, W, method) o JSON según la extensión."""
    frame = statistics_frame(stats, names)
    if str(path).lower().endswith(".json"):
        return write_json({"method": stats.method, "provenance": stats.provenance,
                           "features": frame["feature"].tolist(), "W": stats.W}, path)
    return write_table_csv(frame, path)


def read_statistics(path: str | Path) -> tuple[KnockoffStatistics, List[str]]:
    file = Path(path)
    if not file.is_file():
        raise DataError(f"archivo de estadísticos no encontrado: {file}", stage="selection")
    if file.suffix.lower() == ".json":
        data = read_json(file)
        return KnockoffStatistics(np.asarray(data["W"], dtype=np.float64), data["method"], data.get("provenance", {})), list(data["features"])
    frame = pd.read_csv(file)
    missing = {"feature", "W", "method"} - set(frame.columns)
    if missing:
        raise DataError(f"faltan columnas {sorted(missing)} en {file}", stage="selection")
    method = str(frame["method"].iloc[0]) if len(frame) else "gradient"
    return KnockoffStatistics(frame["W"].to_numpy(dtype=np.float64), method), frame["feature"].astype(str).tolist()


def compute_statistics(net: FilterNetwork, X, Xk, y, method: str, workers: int = 1) -> KnockoffStatistics:
    if method == "gradient":
        return gradient_statistics(net, X, Xk, y, workers=workers)
    if method == "filter":
        return filter_statistics(net)
    raise ConfigError(f"estadístico desconocido: {method}", stage="statistics")
