"""
DiffKnock — Generador de referencia por autoencoder
Encoder lineal p→k, ELU, decoder lineal k→p. Knockoffs = reconstrucción +
residuos permutados por filas, después emparejamiento de marginales.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from diffknock.core import tensor as T
from diffknock.core.errors import ConfigError, DataError, NumericalError, ShapeError
from diffknock.core.layers import Activation, Linear, Module
from diffknock.core.optim import AdamW, cosine_annealed_lr
from diffknock.core.rng import derive_rng
from diffknock.core.tensor import Tensor, no_grad
from diffknock.models.matrix import FeatureMatrix, KnockoffMatrix, as_array
from diffknock.models.schemas import AutoencoderConfig
from diffknock.services.diffusion import match_marginals
from diffknock.utils.checkpoint import load_checkpoint, save_checkpoint
from diffknock.utils.logger import get_logger
from diffknock.version import __version__

logger = get_logger("Baseline")


class Autoencoder(Module):
    kind = "autoencoder"

    def __init__(self, p: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.bottleneck = bottleneck
        self.encoder = Linear(p, bottleneck, rng)
        self.act = Activation("elu")
        self.decoder = Linear(bottleneck, p, rng)

    def architecture(self) -> Dict[str, Any]:
        return {"kind": self.kind, "p": self.p, "bottleneck": self.bottleneck, "activation": "elu"}

    def forward(self, x, aux=None, rng=None):
        return self.decoder(self.act(self.encoder(x)))


@dataclass
class AutoencoderModel:
    network: Autoencoder
    seed: int
    loss_trace: List[float] = field(default_factory=list)
    model_version: str = __version__
    normalization: Optional[Dict[str, Any]] = None

    @property
    def p(self) -> int:
        return self.network.p

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        self.network.eval()
        with no_grad():
            return self.network(Tensor(x)).data

    def fingerprint(self) -> Dict[str, Any]:
        digest = hashlib.sha256()
        for name, values in self.network.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
        return {"seed": int(self.seed), "model_version": self.model_version, "params_hash": digest.hexdigest()}


def train_autoencoder(data: FeatureMatrix | np.ndarray, cfg: AutoencoderConfig, seed: int = 0) -> AutoencoderModel:
    x = as_array(data)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise DataError(f"datos vacíos para el autoencoder: {x.shape}", stage="generator")
    n, p = x.shape
    net = Autoencoder(p, cfg.bottleneck, derive_rng(seed, "init", "autoencoder"))
    opt = AdamW(list(net.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    batch_rng = derive_rng(seed, "batches", "autoencoder")
    trace: List[float] = []
    started = time.perf_counter()
    net.train()
    for epoch in range(cfg.epochs):
        opt.set_lr(cosine_annealed_lr(cfg.lr, epoch, cfg.epochs))
        order = batch_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            batch = Tensor(x[rows])
            try:
                diff = net(batch) - batch
                loss = (diff * diff).mean()
                opt.step(T.backward(loss))
            except NumericalError as e:
                raise NumericalError(f"época {epoch + 1}: {e.message}", stage="generator") from e
            total += loss.item() * rows.size
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise NumericalError(f"pérdida no finita en la época {epoch + 1}", stage="generator")
        trace.append(epoch_loss)
        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            logger.info("[Train] autoencoder época %d/%d mse=%.6f", epoch + 1, cfg.epochs, epoch_loss)
    logger.info("[Train] autoencoder listo en %.1fs", time.perf_counter() - started)
    net.eval()
    return AutoencoderModel(net, int(seed), trace)


def generate_ae_knockoffs(model: AutoencoderModel, data: FeatureMatrix | np.ndarray, seed: int) -> KnockoffMatrix:
    x = as_array(data)
    if x.ndim != 2 or x.shape[1] != model.p:
        raise ShapeError(f"X de forma {x.shape}; el autoencoder espera p={model.p}", stage="knockoffs")
    recon = model.reconstruct(x)
    residuals = x - recon
    order = derive_rng(seed, "residuals", "autoencoder").permutation(x.shape[0])
    raw = recon + residuals[order]
    return match_marginals(data, raw, model.fingerprint())


def save_autoencoder(model: AutoencoderModel, path: str | Path) -> Path:
    header = {
        "architecture": model.network.architecture(),
        "schedule": None,
        "seed": int(model.seed),
        "model_version": model.model_version,
        "normalization": model.normalization,
        "loss_trace": list(model.loss_trace),
    }
    return save_checkpoint(path, header, model.network.state_dict())


def load_autoencoder(path: str | Path) -> AutoencoderModel:
    header, arrays = load_checkpoint(path, expected_kind="autoencoder")
    arch = header["architecture"]
    net = Autoencoder(int(arch["p"]), int(arch["bottleneck"]), np.random.default_rng(0))
    net.load_state_dict(arrays)
    net.eval()
    return AutoencoderModel(
        network=net,
        seed=int(header.get("seed", 0)),
        loss_trace=[float(v) for v in header.get("loss_trace", [])],
        model_version=str(header.get("model_version", __version__)),
        normalization=header.get("normalization"),
    )


class AutoencoderKnockoffGenerator:
    name = "autoencoder"

    def __init__(self, cfg: Optional[AutoencoderConfig] = None, seed: int = 0,
                 model: Optional[AutoencoderModel] = None):
        self.cfg = cfg or AutoencoderConfig()
        self.seed = int(seed)
        self.model = model

    def fit(self, X: FeatureMatrix | np.ndarray) -> "AutoencoderKnockoffGenerator":
        self.model = train_autoencoder(X, self.cfg, self.seed)
        return self

    def generate(self, X: FeatureMatrix | np.ndarray, seed: Optional[int] = None) -> KnockoffMatrix:
        if self.model is None:
            raise ConfigError("autoencoder sin entrenar", stage="knockoffs")
        return generate_ae_knockoffs(self.model, X, self.seed if seed is None else int(seed))

    def save(self, path: str | Path) -> Path:
        if self.model is None:
            raise ConfigError("autoencoder sin entrenar", stage="knockoffs")
        return save_autoencoder(self.model, path)

    @classmethod
    def load(cls, path: str | Path, cfg: Optional[AutoencoderConfig] = None) -> "AutoencoderKnockoffGenerator":
        model = load_autoencoder(path)
        return cls(cfg, model.seed, model)
