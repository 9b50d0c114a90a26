"""Adversarial and auxiliary-classifier losses, including the ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ADVERSARIAL_KINDS = ("hinge", "vanilla", "wgan_gp")


@dataclass
class LossConfig:
    adversarial: str = "hinge"
    use_projection: bool = True
    use_aux_classifier: bool = True
    use_spectral_norm: bool = True
    gp_lambda: float = 10.0
    aux_weight: float = 1.0
    # input-space step of the penalty's parameter-gradient surrogate
    gp_step: float = 1e-3

    def __post_init__(self):
        if self.adversarial not in ADVERSARIAL_KINDS:
            raise ValueError(f"unknown adversarial loss {self.adversarial!r}; expected one of {ADVERSARIAL_KINDS}")
        if self.gp_lambda < 0 or self.aux_weight < 0 or self.gp_step <= 0:
            raise ValueError("gp_lambda and aux_weight must be >= 0 and gp_step > 0")

    def to_dict(self) -> dict:
        return asdict(self)


_BASE = LossConfig("vanilla", use_projection=False, use_aux_classifier=False, use_spectral_norm=False)

# Rows (b)-(g) of the ablation table; each row adds one technique to the previous.
PRESETS: dict[str, LossConfig] = {
    "table5-b": replace(_BASE, adversarial="wgan_gp"),
    "table5-c": _BASE,
    "table5-d": replace(_BASE, use_spectral_norm=True),
    "table5-e": replace(_BASE, use_spectral_norm=True, adversarial="hinge"),
    "table5-f": replace(_BASE, use_spectral_norm=True, adversarial="hinge", use_projection=True),
    "table5-g": LossConfig(),
}


def preset(name: str) -> LossConfig:
    try:
        return replace(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown loss preset {name!r}; choose from {sorted(PRESETS)}") from None


def one_hot(labels, n_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def nll(logp: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under log-probabilities."""
    mask = ad.Tensor(one_hot(labels, logp.shape[1], logp.dtype))
    return ad.scale(ad.sum_(ad.mul(logp, mask)), -1.0 / logp.shape[0])


def _check_batch(score: Tensor) -> None:
    if score.ndim != 1 or score.shape[0] == 0:
        raise ValueError("loss needs a non-empty batch of scalar scores")


def generator_loss(score_fake: Tensor, logp_fake: Tensor | None, sound_labels, cfg: LossConfig):
    """-E[D(G(s,z), s)] - aux_weight * E[log P_C(c | G(s,z))], c the sound label.

    Vanilla mode uses -log sigmoid(D) for the adversarial part. Returns the
    loss tensor and a dict of float terms.
    """
    _check_batch(score_fake)
    if cfg.adversarial == "vanilla":
        adv = ad.mean(ad.softplus(ad.neg(score_fake)))
    else:
        adv = ad.neg(ad.mean(score_fake))
    terms = {"g_adv": adv.item()}
    loss = adv
    if cfg.use_aux_classifier:
        if logp_fake is None:
            raise ValueError("auxiliary classifier enabled but no class log-probabilities given")
        aux = nll(logp_fake, sound_labels)
        terms["aux_fake"] = aux.item()
        loss = ad.add(loss, ad.scale(aux, cfg.aux_weight))
    return loss, terms


def discriminator_loss(score_real: Tensor, score_fake: Tensor, logp_real: Tensor | None, image_labels,
                       cfg: LossConfig, penalty: Tensor | None = None):
    """Hinge margins on real and fake plus the classifier NLL on real images only."""
    _check_batch(score_real)
    if score_real.shape != score_fake.shape:
        raise ValueError(f"real and fake batches differ in size: {score_real.shape} vs {score_fake.shape}")
    if cfg.adversarial == "hinge":
        real = ad.mean(ad.relu(ad.add(ad.neg(score_real), 1.0)))
        fake = ad.mean(ad.relu(ad.add(score_fake, 1.0)))
    elif cfg.adversarial == "vanilla":
        real = ad.mean(ad.softplus(ad.neg(score_real)))
        fake = ad.mean(ad.softplus(score_fake))
    else:
        real = ad.neg(ad.mean(score_real))
        fake = ad.mean(score_fake)
    loss = ad.add(real, fake)
    terms = {"d_real": real.item(), "d_fake": fake.item()}
    if cfg.adversarial == "wgan_gp":
        if penalty is None:
            raise ValueError("wgan_gp needs a gradient penalty term")
        loss = ad.add(loss, penalty)
        terms["gp"] = penalty.item()
    if cfg.use_aux_classifier:
        if logp_real is None:
            raise ValueError("auxiliary classifier enabled but no class log-probabilities given")
        aux = nll(logp_real, image_labels)
        terms["aux_real"] = aux.item()
        loss = ad.add(loss, ad.scale(aux, cfg.aux_weight))
    return loss, terms


def gradient_penalty(critic: Callable[[Tensor, Tensor], Tensor], real: np.ndarray, fake: np.ndarray, s: np.ndarray,
                     rng: np.random.Generator, gp_lambda: float = 10.0, step: float = 1e-3,
                     frozen_critic: Callable[[Tensor, Tensor], Tensor] | None = None) -> Tensor:
    """lambda * E[(|grad_x D(x_hat, s)| - 1)^2] at random interpolates x_hat.

    The input gradient g comes from one backward pass through ``frozen_critic``
    (weights detached). Its parameter gradient uses
    d|g|/dtheta = d/dtheta <u, grad_x D> with u = g/|g| held fixed, and the
    directional derivative is taken as a central difference of the live
    critic along u. The returned tensor carries the exact penalty value.
    """
    if real.shape != fake.shape:
        raise ValueError("real and fake batches differ in shape")
    n = real.shape[0]
    eps = rng.uniform(size=(n,) + (1,) * (real.ndim - 1)).astype(real.dtype)
    x_hat = ad.Tensor(eps * real + (1 - eps) * fake, requires_grad=True)
    s_t = ad.as_tensor(s)
    frozen = frozen_critic or critic
    g = ad.backward(ad.sum_(frozen(x_hat, s_t)), inputs=[x_hat])[x_hat].astype(np.float64)
    norms = np.sqrt((g.reshape(n, -1) ** 2).sum(axis=1))
    value = gp_lambda * float(np.mean((norms - 1.0) ** 2))
    u = np.where(norms[:, None] > 0, g.reshape(n, -1) / np.maximum(norms, 1e-12)[:, None], 0.0)
    u = u.reshape(real.shape).astype(real.dtype)
    probe = ad.Tensor(np.concatenate([x_hat.data + step * u, x_hat.data - step * u]))
    d = critic(probe, ad.Tensor(np.concatenate([s_t.data, s_t.data])))
    slope = ad.scale(ad.sub(ad.slice_rows(d, 0, n), ad.slice_rows(d, n, 2 * n)), 1.0 / (2 * step))
    coeff = ad.Tensor((2.0 * gp_lambda / n * (norms - 1.0)).astype(real.dtype))
    surrogate = ad.sum_(ad.mul(slope, coeff))
    # value of the penalty, gradient of the surrogate
    return ad.add(surrogate, value - surrogate.item())
