"""
DiffKnock — Generador de knockoffs por difusión
Schedule de ruido, denoiser transformer sobre tokens de característica,
entrenamiento DDPM, muestreo inverso y emparejamiento de marginales.

El muestreador solo consume (modelo, schedule, seed): no existe ningún camino
por el que la respuesta y llegue a esta etapa.
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

from diffknock.core import tensor as T
from diffknock.core.errors import ConfigError, DataError, NumericalError, ShapeError
from diffknock.core.layers import Activation, ConditionalLayerNorm, Linear, Module, MultiHeadSelfAttention
from diffknock.core.optim import AdamW, cosine_annealed_lr
from diffknock.core.rng import derive_rng
from diffknock.core.tensor import Tensor, no_grad, parameter
from diffknock.models.matrix import FeatureMatrix, KnockoffMatrix, as_array, check_same_shape, names_of
from diffknock.models.schemas import DiffusionTrainConfig
from diffknock.utils.checkpoint import load_checkpoint, save_checkpoint
from diffknock.utils.logger import get_logger
from diffknock.version import __version__

logger = get_logger("Diffusion")

BETA_MIN = 1e-8
BETA_MAX = 0.999


# ─── Schedule ────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Arrays indexados 0..T; el índice 0 es la referencia sin ruido (ᾱ_0 = 1)."""

    kind: str
    T: int
    s: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_unclamped: np.ndarray
    params: Dict[str, float] = field(default_factory=dict)

    def _check_t(self, t) -> np.ndarray:
        steps = np.asarray(t)
        if np.any(steps < 1) or np.any(steps > self.T):
            raise ConfigError(f"timestep fuera de rango [1, {self.T}]: {t}")
        return steps.astype(int)

    def snr(self, t) -> np.ndarray:
        steps = self._check_t(t)
        ab = self.alpha_bar[steps]
        return ab / (1.0 - ab)

    def log_snr(self, t) -> np.ndarray:
        return np.log(self.snr(t))

    def posterior_variance(self, t) -> np.ndarray:
        """σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t; vale 0 en t = 1."""
        steps = self._check_t(t)
        return (1.0 - self.alpha_bar[steps - 1]) / (1.0 - self.alpha_bar[steps]) * self.beta[steps]

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "T": self.T, "s": self.s, **self.params}

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(repr(sorted(self.to_dict().items())).encode("utf-8"))
        digest.update(np.ascontiguousarray(self.beta, dtype="<f8").tobytes())
        return digest.hexdigest()


def _schedule_from_alpha_bar(kind: str, T_: int, s: float, raw: np.ndarray, params: Dict[str, float]) -> NoiseSchedule:
    beta = np.zeros(T_ + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = raw[1:] / raw[:-1]
    beta[1:] = np.clip(1.0 - ratio, BETA_MIN, BETA_MAX)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(kind, T_, s, beta, alpha, alpha_bar, raw, params)


def build_cosine_schedule(T_: int, s: float = 0.008) -> NoiseSchedule:
    """ᾱ_t = f(t)/f(0), f(t) = cos²(((t/T + s)/(1 + s))·π/2); β derivado y recortado a (0, 0.999]."""
    if int(T_) < 1:
        raise ConfigError(f"T debe ser >= 1: {T_}")
    if not s > 0:
        raise ConfigError(f"el offset s debe ser > 0: {s}")
    steps = np.arange(T_ + 1, dtype=np.float64)
    f = np.cos(((steps / T_ + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    return _schedule_from_alpha_bar("cosine", int(T_), float(s), f / f[0], {})


def build_linear_schedule(T_: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T_) < 1:
        raise ConfigError(f"T debe ser >= 1: {T_}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"rango de β inválido: ({beta_start}, {beta_end})")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, int(T_))])
    raw = np.cumprod(1.0 - beta)
    return _schedule_from_alpha_bar(
        "linear", int(T_), 0.0, raw, {"beta_start": float(beta_start), "beta_end": float(beta_end)}
    )


def schedule_from_config(cfg: DiffusionTrainConfig) -> NoiseSchedule:
    if cfg.schedule == "linear":
        return build_linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    return build_cosine_schedule(cfg.timesteps, cfg.schedule_offset)


def schedule_from_dict(data: Dict[str, Any]) -> NoiseSchedule:
    if data.get("kind") == "linear":
        return build_linear_schedule(int(data["T"]), float(data["beta_start"]), float(data["beta_end"]))
    return build_cosine_schedule(int(data["T"]), float(data["s"]))


# ─── Proceso directo / inverso ───────────────────────────

def noise_blend(x0: np.ndarray, eps: np.ndarray, alpha_bar) -> np.ndarray:
    """√ᾱ·x0 + √(1−ᾱ)·ε (ᾱ escalar o uno por fila)."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_noise(x0, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    x = as_array(x0)
    eps = np.asarray(eps, dtype=np.float64)
    check_same_shape(x, eps, "x0 y ε")
    steps = sched._check_t(t)
    return noise_blend(x, eps, sched.alpha_bar[steps])


def reverse_mean(x_t, eps_hat, alpha_t, beta_t, alpha_bar_t):
    """μ_θ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t."""
    return (np.asarray(x_t) - beta_t / np.sqrt(1.0 - alpha_bar_t) * np.asarray(eps_hat)) / np.sqrt(alpha_t)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Codificación sinusoidal (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


# ─── Denoiser ────────────────────────────────────────────

class TransformerBlock(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.norm_attn = ConditionalLayerNorm(d_model, d_model, rng)
        self.attn = MultiHeadSelfAttention(d_model, heads, rng)
        self.norm_ff = ConditionalLayerNorm(d_model, d_model, rng)
        self.ff_in = Linear(d_model, 4 * d_model, rng)
        self.ff_act = Activation("gelu")
        self.ff_out = Linear(4 * d_model, d_model, rng)

    def forward(self, x, aux=None, rng=None):
        h = x + self.attn(self.norm_attn(x, aux))
        return h + self.ff_out(self.ff_act(self.ff_in(self.norm_ff(h, aux))))


class TransformerDenoiser(Module):
    """ε_θ(x_t, t): cada característica es un token de dimensión d."""

    kind = "denoiser"

    def __init__(self, p: int, d_model: int, layers: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.d_model = d_model
        self.embed = Linear(1, d_model, rng)
        self.position = parameter(0.02 * rng.standard_normal((p, d_model)))
        self.time_in = Linear(d_model, d_model, rng)
        self.time_act = Activation("gelu")
        self.time_out = Linear(d_model, d_model, rng)
        self.blocks = [TransformerBlock(d_model, heads, rng) for _ in range(layers)]
        self.norm_out = ConditionalLayerNorm(d_model, d_model, rng)
        self.head = Linear(d_model, 1, rng)

    def architecture(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "p": self.p,
            "d_model": self.d_model,
            "layers": len(self.blocks),
            "heads": self.blocks[0].attn.heads if self.blocks else 1,
        }

    def check_input(self, x, aux):
        if x.ndim != 2 or x.shape[1] != self.p:
            raise ShapeError(f"el denoiser espera (B, {self.p}), recibido {x.shape}")
        if aux is None or aux.shape != (x.shape[0],):
            raise ShapeError("el denoiser requiere un timestep por fila")

    def forward(self, x, aux=None, rng=None):
        b = x.shape[0]
        temb = Tensor(timestep_embedding(aux.data, self.d_model))
        temb = self.time_out(self.time_act(self.time_in(temb)))
        h = self.embed(x.reshape(b, self.p, 1)) + self.position
        for block in self.blocks:
            h = block(h, temb)
        out = self.head(self.norm_out(h, temb))
        return out.reshape(b, self.p)


@dataclass
class DenoiserModel:
    network: TransformerDenoiser
    schedule: NoiseSchedule
    seed: int
    loss_trace: List[float] = field(default_factory=list)
    model_version: str = __version__
    normalization: Optional[Dict[str, Any]] = None

    @property
    def p(self) -> int:
        return self.network.p

    def predict_noise(self, x_t: np.ndarray, t: np.ndarray) -> np.ndarray:
        self.network.eval()
        with no_grad():
            return self.network(Tensor(x_t), Tensor(np.asarray(t, dtype=np.float64))).data

    def params_hash(self) -> str:
        digest = hashlib.sha256()
        for name, values in self.network.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
        return digest.hexdigest()

    def fingerprint(self) -> Dict[str, Any]:
        return {
            "schedule_hash": self.schedule.fingerprint(),
            "seed": int(self.seed),
            "model_version": self.model_version,
            "params_hash": self.params_hash(),
        }


def denoising_loss(net: TransformerDenoiser, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   sched: NoiseSchedule) -> Tensor:
    """MSE por elemento entre ε y ε_θ(x_t, t)."""
    x_t = noise_blend(x0, eps, sched.alpha_bar[t])
    diff = net(Tensor(x_t), Tensor(t.astype(np.float64))) - Tensor(eps)
    return (diff * diff).mean()


def build_denoiser(p: int, cfg: DiffusionTrainConfig, seed: int) -> TransformerDenoiser:
    return TransformerDenoiser(p, cfg.d_model, cfg.layers, cfg.heads, derive_rng(seed, "init", "denoiser"))


def train_denoiser(data: FeatureMatrix | np.ndarray, cfg: DiffusionTrainConfig, seed: int = 0) -> DenoiserModel:
    """Entrena ε_θ sobre datos ya normalizados. Devuelve el modelo con la traza de pérdida por época."""
    x = as_array(data)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise DataError(f"datos vacíos para entrenar el denoiser: {x.shape}", stage="generator")
    if not np.isfinite(x).all():
        raise NumericalError("datos no finitos para entrenar el denoiser", stage="generator")
    n, p = x.shape
    sched = schedule_from_config(cfg)
    net = build_denoiser(p, cfg, seed)
    opt = AdamW(list(net.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    batch_rng = derive_rng(seed, "batches", "denoiser")
    noise_rng = derive_rng(seed, "noise", "denoiser")

    trace: List[float] = []
    best = math.inf
    stale = 0
    started = time.perf_counter()
    logger.info("[Train] denoiser n=%d p=%d L=%d d=%d h=%d T=%d épocas=%d params=%d",
                n, p, cfg.layers, cfg.d_model, cfg.heads, cfg.timesteps, cfg.epochs, net.num_parameters())
    net.train()
    for epoch in range(cfg.epochs):
        lr = cosine_annealed_lr(cfg.lr, epoch, cfg.epochs)
        opt.set_lr(lr)
        order = batch_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            t = noise_rng.integers(1, sched.T + 1, size=rows.size)
            eps = noise_rng.standard_normal((rows.size, p))
            try:
                loss = denoising_loss(net, x[rows], t, eps, sched)
                grads = T.backward(loss)
                opt.step(grads)
            except NumericalError as e:
                raise NumericalError(f"época {epoch + 1}: {e.message}", stage="generator") from e
            total += loss.item() * rows.size
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise NumericalError(f"pérdida no finita en la época {epoch + 1}", stage="generator")
        trace.append(epoch_loss)
        logger.debug("[Train] época %d loss=%.6f lr=%.3g", epoch + 1, epoch_loss, lr)
        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            logger.info("[Train] época %d/%d loss=%.6f lr=%.3g", epoch + 1, cfg.epochs, epoch_loss, lr)
        if cfg.patience is not None:
            if epoch_loss < best:
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    logger.info("[Train] parada temprana en la época %d (patience=%d)", epoch + 1, cfg.patience)
                    break
    logger.info("[Train] denoiser listo en %.1fs loss_final=%.6f", time.perf_counter() - started, trace[-1])
    net.eval()
    return DenoiserModel(net, sched, int(seed), trace)


# ─── Muestreo ────────────────────────────────────────────

def _sample_shard(model: DenoiserModel, rows: Sequence[int], seed: int) -> np.ndarray:
    sched = model.schedule
    p = model.p
    gens = [derive_rng(seed, "sample", int(r)) for r in rows]
    x = np.stack([g.standard_normal(p) for g in gens])
    for t in range(sched.T, 0, -1):
        steps = np.full(len(rows), t)
        eps_hat = model.predict_noise(x, steps)
        x = reverse_mean(x, eps_hat, sched.alpha[t], sched.beta[t], sched.alpha_bar[t])
        if t > 1:
            sigma = math.sqrt(float(sched.posterior_variance(t)))
            x = x + sigma * np.stack([g.standard_normal(p) for g in gens])
        if not np.isfinite(x).all():
            raise NumericalError(f"estado no finito en el paso t={t}", stage="knockoffs")
    return x


def sample_knockoffs_raw(model: DenoiserModel, sched: Optional[NoiseSchedule], n: int, seed: int,
                         shard_rows: int = 256, workers: int = 1) -> np.ndarray:
    """
    Recorre t = T..1 con μ_θ y varianza posterior (sin ruido en t = 1).
    Cada fila tiene su propio stream (seed, "sample", fila) y los shards tienen
    tamaño fijo, así que el resultado no depende del número de workers.
    """
    if n < 1:
        raise ConfigError(f"n debe ser >= 1: {n}", stage="knockoffs")
    if sched is not None and sched.fingerprint() != model.schedule.fingerprint():
        raise ConfigError("el schedule no coincide con el del modelo entrenado", stage="knockoffs")
    shards = [list(range(start, min(start + shard_rows, n))) for start in range(0, n, shard_rows)]
    started = time.perf_counter()
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda rows: _sample_shard(model, rows, seed), shards))
    else:
        parts = [_sample_shard(model, rows, seed) for rows in shards]
    out = np.concatenate(parts, axis=0)
    logger.info("[Sample] %d filas en %d shards (%d workers) en %.1fs",
                n, len(shards), workers, time.perf_counter() - started)
    return out


def match_marginals(original: FeatureMatrix | np.ndarray, raw: np.ndarray,
                    fingerprint: Optional[Dict[str, Any]] = None) -> KnockoffMatrix:
    """Fila i, columna j -> estadístico de orden r_i de la columna original (r_i = rango de raw[i, j])."""
    x = as_array(original)
    raw = np.asarray(raw, dtype=np.float64)
    check_same_shape(x, raw, "original y knockoffs")
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        ranks = np.empty(x.shape[0], dtype=int)
        ranks[np.argsort(raw[:, j], kind="stable")] = np.arange(x.shape[0])
        out[:, j] = np.sort(x[:, j], kind="stable")[ranks]
    logger.debug("[Match] %d columnas emparejadas", x.shape[1])
    return KnockoffMatrix(out, names_of(original, x.shape[1]), "marginal-matched", dict(fingerprint or {}))


# ─── Persistencia ────────────────────────────────────────

def save_denoiser(model: DenoiserModel, path: str | Path) -> Path:
    header = {
        "architecture": model.network.architecture(),
        "schedule": model.schedule.to_dict(),
        "seed": int(model.seed),
        "model_version": model.model_version,
        "normalization": model.normalization,
        "loss_trace": list(model.loss_trace),
    }
    return save_checkpoint(path, header, model.network.state_dict())


def load_denoiser(path: str | Path) -> DenoiserModel:
    header, arrays = load_checkpoint(path, expected_kind="denoiser")
    arch = header["architecture"]
    net = TransformerDenoiser(int(arch["p"]), int(arch["d_model"]), int(arch["layers"]), int(arch["heads"]),
                              np.random.default_rng(0))
    net.load_state_dict(arrays)
    net.eval()
    return DenoiserModel(
        network=net,
        schedule=schedule_from_dict(header["schedule"]),
        seed=int(header.get("seed", 0)),
        loss_trace=[float(v) for v in header.get("loss_trace", [])],
        model_version=str(header.get("model_version", __version__)),
        normalization=header.get("normalization"),
    )


# ─── Fachada ─────────────────────────────────────────────

class DiffusionKnockoffGenerator:
    """fit(X) / sample(n) / generate(X). Ningún método acepta la respuesta."""

    name = "diffusion"

    def __init__(self, cfg: Optional[DiffusionTrainConfig] = None, seed: int = 0, workers: int = 1,
                 model: Optional[DenoiserModel] = None):
        self.cfg = cfg or DiffusionTrainConfig()
        self.seed = int(seed)
        self.workers = workers
        self.model = model

    def fit(self, X: FeatureMatrix | np.ndarray) -> "DiffusionKnockoffGenerator":
        self.model = train_denoiser(X, self.cfg, self.seed)
        return self

    def _require_model(self) -> DenoiserModel:
        if self.model is None:
            raise ConfigError("generador de difusión sin entrenar", stage="knockoffs")
        return self.model

    def sample(self, n: int, seed: Optional[int] = None) -> np.ndarray:
        model = self._require_model()
        return sample_knockoffs_raw(model, None, n, self.seed if seed is None else int(seed),
                                    self.cfg.sample_shard_rows, self.workers)

    def generate(self, X: FeatureMatrix | np.ndarray, seed: Optional[int] = None) -> KnockoffMatrix:
        x = as_array(X)
        model = self._require_model()
        if x.shape[1] != model.p:
            raise ShapeError(f"X tiene {x.shape[1]} columnas; el modelo se entrenó con {model.p}", stage="knockoffs")
        raw = self.sample(x.shape[0], seed)
        return match_marginals(X, raw, model.fingerprint())

    def save(self, path: str | Path) -> Path:
        return save_denoiser(self._require_model(), path)

    @classmethod
    def load(cls, path: str | Path, cfg: Optional[DiffusionTrainConfig] = None, workers: int = 1) -> "DiffusionKnockoffGenerator":
        model = load_denoiser(path)
        return cls(cfg, model.seed, workers, model)
