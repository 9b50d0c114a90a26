"""Adam, the alternating D/G update schedule, and resumable trainer state."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .data import PairedArrays, index_batches
from .losses import LossConfig, discriminator_loss, generator_loss, gradient_penalty
from .models import Discriminator, Generator, ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "trainer"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    g_steps_per_iter: int = 5
    d_steps_per_iter: int = 1
    epochs: int = 300
    # stop after this many iterations; 0 runs for `epochs` passes over the data
    iterations: int = 0
    batch_size: int = 64
    seed: int = 0
    noise_dim: int = 10
    # decay of the generator weight average used for sampling; 0 samples from the raw weights
    g_ema_decay: float = 0.99
    record_wallclock: bool = False

    def __post_init__(self):
        for name in ("lr", "g_steps_per_iter", "d_steps_per_iter", "epochs", "batch_size", "noise_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.g_ema_decay < 1:
            raise ValueError("g_ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


class ConditionScaler:
    """Per-dimension standardization of condition vectors, fit on training data."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    @classmethod
    def fit(cls, conds: np.ndarray, floor: float = 1e-3) -> "ConditionScaler":
        conds = np.asarray(conds, dtype=np.float64)
        return cls(conds.mean(axis=0), np.maximum(conds.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> "ConditionScaler":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, conds: np.ndarray) -> np.ndarray:
        return ((np.asarray(conds, dtype=np.float32) - self.mean) / self.std).astype(np.float32)


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (param, m, v). ``t`` counts from 1."""
    dt = param.dtype
    m = (beta1 * m + (1 - beta1) * grad).astype(dt)
    v = (beta2 * v + (1 - beta2) * grad * grad).astype(dt)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return (param - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dt), m, v


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, g.astype(p.dtype), self.m[name], self.v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps)

    def blobs(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_blobs(self, prefix: str, blobs: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = blobs[f"{prefix}/m/{name}"].copy()
            self.v[name] = blobs[f"{prefix}/v/{name}"].copy()


def model_config_for(base: ModelConfig, loss: LossConfig) -> ModelConfig:
    """Architecture switches follow the loss configuration's ablation flags."""
    return replace(base, use_spectral_norm=loss.use_spectral_norm, use_projection=loss.use_projection,
                   concat_condition=not loss.use_projection)


def _mean_terms(terms: list[dict]) -> dict:
    keys = sorted({k for t in terms for k in t})
    return {k: float(np.mean([t[k] for t in terms if k in t])) for k in keys}


class Trainer:
    """Owns G, D, their optimizers, the noise RNG, and the position in the data stream."""

    def __init__(self, data: PairedArrays, model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
                 scaler: ConditionScaler | None = None, extra_meta: dict | None = None):
        if len(data) == 0:
            raise ValueError("training data is empty")
        if data.sound_labels.max() >= model_cfg.n_classes or data.image_labels.max() >= model_cfg.n_classes:
            raise ValueError("labels exceed the model's class count")
        self.train_cfg, self.loss_cfg = train_cfg, loss_cfg
        self.model_cfg = model_config_for(replace(model_cfg, noise_dim=train_cfg.noise_dim), loss_cfg)
        if data.conditions.shape[1] != self.model_cfg.cond_dim:
            raise ValueError(f"conditions are {data.conditions.shape[1]}-d, model expects {self.model_cfg.cond_dim}")
        self.data = data
        self.scaler = scaler or ConditionScaler.fit(data.conditions)
        self.conds = self.scaler(data.conditions)
        self.images = data.images.astype(np.float32)
        seed = train_cfg.seed
        self.G = Generator(self.model_cfg, np.random.default_rng([seed, 0]))
        self.G_ema = Generator(self.model_cfg, np.random.default_rng([seed, 0]))
        self.D = Discriminator(self.model_cfg, np.random.default_rng([seed, 1]))
        self.rng = np.random.default_rng([seed, 2])
        opt = dict(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
        self.opt_g = Adam(self.G.named_tensors(), **opt)
        self.opt_d = Adam(self.D.named_tensors(), **opt)
        self.iteration = 0
        self.epoch = 0
        self.batch_pos = 0
        self.extra_meta = dict(extra_meta or {})
        self._t0 = time.perf_counter()

    # -- data stream ------------------------------------------------------------
    def next_batch(self) -> np.ndarray:
        batches = index_batches(len(self.data), self.train_cfg.batch_size, self.train_cfg.seed, self.epoch)
        idx = batches[self.batch_pos]
        self.batch_pos += 1
        if self.batch_pos == len(batches):
            self.epoch, self.batch_pos = self.epoch + 1, 0
        return idx

    def noise(self, n: int) -> np.ndarray:
        return self.rng.standard_normal((n, self.model_cfg.noise_dim)).astype(np.float32)

    # -- updates ------------------------------------------------------------------
    def d_update(self) -> dict:
        cfg = self.loss_cfg
        idx = self.next_batch()
        n = len(idx)
        real, s = self.images[idx], self.conds[idx]
        fake = self.G(s, self.noise(n)).data
        w = self.D.weights(training=True)
        score, logp = self.D.forward(np.concatenate([real, fake]), np.concatenate([s, s]), w,
                                     with_aux=cfg.use_aux_classifier)
        penalty = None
        if cfg.adversarial == "wgan_gp":
            frozen = {k: t.detach() for k, t in w.items()}
            penalty = gradient_penalty(self.D.critic(w), real, fake, s, self.rng, cfg.gp_lambda, cfg.gp_step,
                                       frozen_critic=self.D.critic(frozen))
        loss, terms = discriminator_loss(
            ad.slice_rows(score, 0, n), ad.slice_rows(score, n, 2 * n),
            ad.slice_rows(logp, 0, n) if logp is not None else None,
            self.data.image_labels[idx], cfg, penalty)
        self.opt_d.step(ad.backward(loss))
        terms["d_loss"] = loss.item()
        return terms

    def g_update(self) -> dict:
        cfg = self.loss_cfg
        idx = self.next_batch()
        s = self.conds[idx]
        fake = self.G(s, self.noise(len(idx)))
        # D's weights take no gradient here; its power iteration still advances
        w = {k: t.detach() for k, t in self.D.weights(training=True).items()}
        score, logp = self.D.forward(fake, s, w, with_aux=cfg.use_aux_classifier)
        loss, terms = generator_loss(score, logp, self.data.sound_labels[idx], cfg)
        self.opt_g.step(ad.backward(loss, inputs=self.opt_g.params.values()))
        terms["g_loss"] = loss.item()
        return terms

    def step(self) -> dict:
        d_terms = [self.d_update() for _ in range(self.train_cfg.d_steps_per_iter)]
        g_terms = [self.g_update() for _ in range(self.train_cfg.g_steps_per_iter)]
        self._update_ema()
        self.iteration += 1
        d, g = _mean_terms(d_terms), _mean_terms(g_terms)
        adv = {k: d[k] for k in ("d_real", "d_fake", "gp") if k in d}
        adv["g_adv"] = g["g_adv"]
        if "aux_fake" in g:
            adv["aux_fake"] = g["aux_fake"]
        record = {
            "iter": self.iteration,
            "d_loss": d["d_loss"],
            "g_loss": g["g_loss"],
            "aux_loss_real": d.get("aux_real"),
            "adv_terms": adv,
            "wallclock_s": round(time.perf_counter() - self._t0, 3) if self.train_cfg.record_wallclock else None,
        }
        if not all(math.isfinite(v) for v in (record["d_loss"], record["g_loss"])):
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration}")
        return record

    def _update_ema(self) -> None:
        decay = self.train_cfg.g_ema_decay
        live = self.G.named_tensors()
        for name, t in self.G_ema.named_tensors().items():
            t.data = (decay * t.data + (1 - decay) * live[name].data).astype(t.dtype)

    @property
    def sampler(self) -> Generator:
        """Generator used for samples and scores: the weight average when enabled."""
        return self.G_ema if self.train_cfg.g_ema_decay > 0 else self.G

    def generate(self, conds: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.sampler(self.scaler(np.atleast_2d(conds)), np.atleast_2d(z).astype(np.float32)).data

    @property
    def total_iterations(self) -> int:
        cfg = self.train_cfg
        if cfg.iterations:
            return cfg.iterations
        per_epoch = math.ceil(len(self.data) / cfg.batch_size)
        return math.ceil(cfg.epochs * per_epoch / (cfg.d_steps_per_iter + cfg.g_steps_per_iter))

    def train(self, n_iters: int | None = None, callbacks: Iterable[Callable[["Trainer", dict], None]] = (),
              diagnostic_path=None) -> list[dict]:
        """Run ``n_iters`` more iterations (default: up to the configured total)."""
        target = self.iteration + n_iters if n_iters is not None else self.total_iterations
        callbacks = list(callbacks)
        log = []
        while self.iteration < target:
            try:
                record = self.step()
            except FloatingPointError as exc:
                if diagnostic_path is not None:
                    self.save(diagnostic_path)
                    logger.error("training diverged; state dumped to %s", diagnostic_path)
                raise TrainingDiverged(f"iteration {self.iteration + 1}: {exc}") from exc
            log.append(record)
            for cb in callbacks:
                cb(self, record)
        return log

    # -- persistence -----------------------------------------------------------------
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "kind": CHECKPOINT_KIND,
            "iteration": self.iteration,
            "epoch": self.epoch,
            "batch_pos": self.batch_pos,
            "adam_t": {"G": self.opt_g.t, "D": self.opt_d.t},
            "rng": self.rng.bit_generator.state,
            "model": self.model_cfg.to_dict(),
            "train": self.train_cfg.to_dict(),
            "loss": self.loss_cfg.to_dict(),
            "extra": self.extra_meta,
        }
        blobs = {}
        for prefix, net in (("G", self.G), ("Gema", self.G_ema), ("D", self.D)):
            for name, t in net.named_tensors().items():
                blobs[f"{prefix}/{name}"] = t.data
            for name, layer in net.sn_layers().items():
                blobs[f"{prefix}/{name}.sn_u"] = layer.params.sn_u
        blobs.update(self.opt_g.blobs("optG"))
        blobs.update(self.opt_d.blobs("optD"))
        blobs["cond/mean"] = self.scaler.mean
        blobs["cond/std"] = self.scaler.std
        return meta, blobs

    def save(self, path) -> None:
        checkpoint.save(path, *self.state())

    def load_state(self, meta: dict, blobs: Mapping[str, np.ndarray]) -> None:
        for prefix, net in (("G", self.G), ("Gema", self.G_ema), ("D", self.D)):
            for name, t in net.named_tensors().items():
                t.data = _expect(blobs, f"{prefix}/{name}", t.data.shape)
            for name, layer in net.sn_layers().items():
                layer.params.sn_u = _expect(blobs, f"{prefix}/{name}.sn_u", layer.params.sn_u.shape)
        self.opt_g.load_blobs("optG", blobs, meta["adam_t"]["G"])
        self.opt_d.load_blobs("optD", blobs, meta["adam_t"]["D"])
        self.iteration, self.epoch, self.batch_pos = meta["iteration"], meta["epoch"], meta["batch_pos"]
        self.rng.bit_generator.state = meta["rng"]
        self.extra_meta = meta.get("extra", {})

    @classmethod
    def from_checkpoint(cls, path, data: PairedArrays) -> "Trainer":
        meta, blobs = checkpoint.load(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise checkpoint.CheckpointError(f"{path} is not a trainer checkpoint")
        scaler = ConditionScaler(blobs["cond/mean"], blobs["cond/std"])
        trainer = cls(data, ModelConfig(**meta["model"]), TrainConfig(**meta["train"]), LossConfig(**meta["loss"]),
                      scaler=scaler)
        trainer.load_state(meta, blobs)
        return trainer


def _expect(blobs: Mapping[str, np.ndarray], name: str, shape) -> np.ndarray:
    if name not in blobs:
        raise checkpoint.CheckpointError(f"checkpoint is missing {name}")
    arr = blobs[name]
    if arr.shape != tuple(shape):
        raise checkpoint.CheckpointError(f"{name}: shape {arr.shape} != expected {tuple(shape)}")
    return arr.copy()


@dataclass
class GeneratorBundle:
    """Inference-only view of a checkpoint: generator, discriminator, scaler, configs.

    ``G`` is the averaged generator when the run kept one, else the raw weights.
    """

    G: Generator
    D: Discriminator
    scaler: ConditionScaler
    model_cfg: ModelConfig
    meta: dict

    @classmethod
    def load(cls, path, use_ema: bool = True) -> "GeneratorBundle":
        meta, blobs = checkpoint.load(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise checkpoint.CheckpointError(f"{path} is not a trainer checkpoint")
        cfg = ModelConfig(**meta["model"])
        G, D = Generator(cfg), Discriminator(cfg)
        g_prefix = "Gema" if use_ema and meta["train"].get("g_ema_decay", 0) > 0 else "G"
        for prefix, net in ((g_prefix, G), ("D", D)):
            for name, t in net.named_tensors().items():
                t.data = _expect(blobs, f"{prefix}/{name}", t.data.shape)
            for name, layer in net.sn_layers().items():
                layer.params.sn_u = _expect(blobs, f"{prefix}/{name}.sn_u", layer.params.sn_u.shape)
        return cls(G, D, ConditionScaler(blobs["cond/mean"], blobs["cond/std"]), cfg, meta)

    def generate(self, conds: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.G(self.scaler(np.atleast_2d(conds)), np.atleast_2d(z).astype(np.float32)).data


def train(data: PairedArrays, train_cfg: TrainConfig, loss_cfg: LossConfig, model_cfg: ModelConfig,
          callbacks: Iterable[Callable[[Trainer, dict], None]] = (), diagnostic_path=None):
    """Train from scratch; returns (trainer, metrics log)."""
    trainer = Trainer(data, model_cfg, train_cfg, loss_cfg)
    log = trainer.train(callbacks=callbacks, diagnostic_path=diagnostic_path)
    return trainer, log
