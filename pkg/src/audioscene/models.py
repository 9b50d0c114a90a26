"""Sound-conditioned generator and projection discriminator with an auxiliary classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv2d, ConvTranspose2d, Layer, Linear

CLASS_NAMES = ("dog", "drum", "guitar", "piano", "plane", "speedboat", "dam", "soccer", "baseball")


@dataclass
class ModelConfig:
    cond_dim: int = 256
    noise_dim: int = 10
    n_classes: int = 9
    image_size: int = 64
    g_channels: tuple[int, ...] = (256, 128, 64, 32)
    d_channels: tuple[int, ...] = (32, 64, 128, 256)
    cond_embed_dim: int = 32
    use_spectral_norm: bool = True
    use_projection: bool = True
    # conditioning path for discriminators without projection
    concat_condition: bool = False
    leak: float = 0.2

    def __post_init__(self):
        self.g_channels = tuple(int(c) for c in self.g_channels)
        self.d_channels = tuple(int(c) for c in self.d_channels)
        if self.image_size % 16:
            raise ValueError("image_size must be a multiple of 16 (four stride-2 upsamplings)")
        if len(self.g_channels) != 4 or len(self.d_channels) != 4:
            raise ValueError("generator and discriminator each take exactly four channel widths")
        if self.use_projection and self.concat_condition:
            raise ValueError("projection and concatenation conditioning are exclusive")

    @property
    def input_dim(self) -> int:
        return self.cond_dim + self.noise_dim

    @property
    def feat_dim(self) -> int:
        return self.d_channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    layers: dict[str, Layer]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.layers.items():
            for pname, t in layer.tensors().items():
                out[f"{lname}.{pname}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def sn_layers(self) -> dict[str, Layer]:
        return {name: layer for name, layer in self.layers.items() if layer.sn}


class Generator(Module):
    """concat(s, z) -> linear -> 4 transposed-conv blocks -> tanh image."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.g_channels
        self.start = cfg.image_size // 16
        self.layers = {"fc": Linear(cfg.input_dim, c[0] * self.start ** 2, rng=rng, dtype=dtype)}
        widths = list(c) + [3]
        for i in range(4):
            self.layers[f"up{i}"] = ConvTranspose2d(widths[i], widths[i + 1], 4, 2, 1, rng=rng, dtype=dtype)

    def __call__(self, s, z) -> Tensor:
        s, z = ad.as_tensor(s), ad.as_tensor(z)
        if s.ndim != 2 or z.ndim != 2 or s.shape[0] != z.shape[0]:
            raise ValueError(f"generator expects (N, d) condition and noise, got {s.shape} and {z.shape}")
        if s.shape[1] + z.shape[1] != self.cfg.input_dim:
            raise ValueError(f"condition dim {s.shape[1]} + noise dim {z.shape[1]} != input dim {self.cfg.input_dim}")
        h = self.layers["fc"](ad.concat([s, z], axis=1))
        h = ad.reshape(ad.relu(h), (s.shape[0], self.cfg.g_channels[0], self.start, self.start))
        for i in range(3):
            h = ad.relu(self.layers[f"up{i}"](h))
        return ad.tanh(self.layers["up3"](h))


def generate(g: Generator, s: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Images for a batch of conditions and caller-supplied noise."""
    return g(np.atleast_2d(s).astype(np.float32), np.atleast_2d(z).astype(np.float32)).data


class Discriminator(Module):
    """Conv trunk phi(x); score = psi(phi) + <P s, phi>; aux head on phi.

    Without projection the score is psi(phi), or psi([phi, e(s)]) when the
    condition is concatenated through a small embedding e.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.cfg = cfg
        sn = cfg.use_spectral_norm
        d = cfg.d_channels
        widths = [3] + list(d)
        self.layers: dict[str, Layer] = {}
        for i in range(4):
            k, stride = (4, 2) if i < 3 else (3, 1)
            self.layers[f"conv{i}"] = Conv2d(widths[i], widths[i + 1], k, stride, 1, sn=sn, rng=rng, dtype=dtype)
        psi_in = cfg.feat_dim
        if cfg.concat_condition:
            self.layers["embed"] = Linear(cfg.cond_dim, cfg.cond_embed_dim, sn=sn, rng=rng, dtype=dtype)
            psi_in += cfg.cond_embed_dim
        self.layers["psi"] = Linear(psi_in, 1, sn=sn, rng=rng, dtype=dtype)
        if cfg.use_projection:
            self.layers["proj"] = Linear(cfg.cond_dim, cfg.feat_dim, bias=False, sn=sn, rng=rng, dtype=dtype)
        self.layers["aux"] = Linear(cfg.feat_dim, cfg.n_classes, sn=sn, rng=rng, dtype=dtype)

    def weights(self, training: bool = True) -> dict[str, Tensor]:
        """Effective weights for one forward pass; advances power iteration when training."""
        return {name: layer.weight(training) for name, layer in self.layers.items()}

    def feature_trunk(self, x, w: dict[str, Tensor] | None = None) -> Tensor:
        w = self.weights(False) if w is None else w
        h = ad.as_tensor(x)
        if h.ndim != 4 or h.shape[1:] != (3, self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"expected (N, 3, {self.cfg.image_size}, {self.cfg.image_size}) images, got {h.shape}")
        for i in range(4):
            h = ad.leaky_relu(self.layers[f"conv{i}"](h, weight=w[f"conv{i}"]), self.cfg.leak)
        return ad.sum_(h, axis=(2, 3))

    def score_from_features(self, phi: Tensor, s, w: dict[str, Tensor]) -> Tensor:
        s = ad.as_tensor(s)
        if s.ndim != 2 or s.shape != (phi.shape[0], self.cfg.cond_dim):
            raise ValueError(f"condition must be ({phi.shape[0]}, {self.cfg.cond_dim}), got {s.shape}")
        head_in = phi
        if self.cfg.concat_condition:
            e = ad.leaky_relu(self.layers["embed"](s, weight=w["embed"]), self.cfg.leak)
            head_in = ad.concat([phi, e], axis=1)
        score = ad.reshape(self.layers["psi"](head_in, weight=w["psi"]), (phi.shape[0],))
        if self.cfg.use_projection:
            ps = self.layers["proj"](s, weight=w["proj"])
            score = ad.add(score, ad.sum_(ad.mul(ps, phi), axis=1))
        return score

    def logits_from_features(self, phi: Tensor, w: dict[str, Tensor]) -> Tensor:
        return self.layers["aux"](phi, weight=w["aux"])

    def forward(self, x, s, w: dict[str, Tensor] | None = None, with_aux: bool = True, training: bool = True):
        """(score (N,), log-probabilities (N, K) or None) sharing one trunk pass."""
        w = self.weights(training) if w is None else w
        phi = self.feature_trunk(x, w)
        score = self.score_from_features(phi, s, w)
        logp = ad.log_softmax(self.logits_from_features(phi, w), axis=1) if with_aux else None
        return score, logp

    def discriminate(self, x, s, training: bool = False) -> Tensor:
        return self.forward(x, s, with_aux=False, training=training)[0]

    def classify(self, x, training: bool = False) -> Tensor:
        w = self.weights(training)
        return ad.log_softmax(self.logits_from_features(self.feature_trunk(x, w), w), axis=1)

    def critic(self, w: dict[str, Tensor]):
        """Score function with fixed weights, as used by the gradient penalty."""
        return lambda x, s: self.score_from_features(self.feature_trunk(x, w), s, w)
