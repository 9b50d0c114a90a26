"""Parameterized layers and spectral normalization by power iteration."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

SN_EPS = 1e-12
INIT_STD = 0.02


@dataclass
class LayerParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    sn_u: Optional[np.ndarray] = None  # persistent left-singular estimate, unit norm


def init_normal(shape, rng: np.random.Generator, std: float = INIT_STD, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def init_zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / max(float(np.linalg.norm(x)), SN_EPS)


def power_iteration_step(w: np.ndarray, u: np.ndarray):
    """One step v' = n(W^T u), u' = n(W v'), sigma = u'^T W v'.

    ``w`` is a 2-D matrix view. A zero matrix gives sigma = 0; callers
    decide how to treat that.
    """
    v = _normalize(w.T @ u)
    wv = w @ v
    u_new = _normalize(wv)
    sigma = float(u_new @ wv)
    return u_new, v, sigma


def estimate_sigma(w: np.ndarray, n_iter: int = 50, u: np.ndarray | None = None, seed: int = 0) -> float:
    """Largest singular value estimate from ``n_iter`` power-iteration steps."""
    mat = w.reshape(w.shape[0], -1).astype(np.float64)
    if u is None:
        u = _normalize(np.random.default_rng(seed).standard_normal(mat.shape[0]))
    sigma = 0.0
    for _ in range(n_iter):
        u, _, sigma = power_iteration_step(mat, u)
    return sigma


def spectrally_normalized_weight(p: LayerParams, training: bool = True) -> Tensor:
    """W / sigma_hat with sigma_hat from one power-iteration step.

    Conv kernels are viewed as out_channels x (in_channels * kh * kw). The
    step's u' is stored back only in training mode. sigma_hat is treated as
    a constant for the gradient.
    """
    if p.sn_u is None:
        raise ValueError("layer has no spectral-norm state")
    w = p.weight.data
    mat = w.reshape(w.shape[0], -1)
    u_new, _, sigma = power_iteration_step(mat, p.sn_u)
    if training:
        p.sn_u = u_new.astype(p.sn_u.dtype)
    if sigma <= SN_EPS:
        logger.warning("spectral norm of a zero weight; leaving it unnormalized")
        return p.weight
    return ad.scale(p.weight, 1.0 / sigma)


def effective_weight(p: LayerParams, sn: bool, training: bool = True) -> Tensor:
    return spectrally_normalized_weight(p, training) if sn else p.weight


class Layer:
    """Common parameter plumbing; subclasses implement ``apply``."""

    def __init__(self, weight_shape, bias: bool, sn: bool, rng: np.random.Generator, dtype, sn_rows: int):
        self.sn = sn
        self.params = LayerParams(
            weight=init_normal(weight_shape, rng, dtype=dtype),
            bias=init_zeros((self.out_features,), dtype) if bias else None,
            sn_u=_normalize(rng.standard_normal(sn_rows)).astype(dtype) if sn else None,
        )

    def weight(self, training: bool = True) -> Tensor:
        return effective_weight(self.params, self.sn, training)

    def __call__(self, x: Tensor, training: bool = True, weight: Tensor | None = None) -> Tensor:
        return self.apply(x, self.weight(training) if weight is None else weight)

    def apply(self, x: Tensor, w: Tensor) -> Tensor:
        raise NotImplementedError

    def tensors(self) -> dict[str, Tensor]:
        out = {"weight": self.params.weight}
        if self.params.bias is not None:
            out["bias"] = self.params.bias
        return out


class Linear(Layer):
    """y = x W^T + b with W stored (out, in)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, sn: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__((out_features, in_features), bias, sn, rng, dtype, out_features)

    def apply(self, x: Tensor, w: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"Linear({self.in_features}->{self.out_features}) got input {x.shape}")
        y = ad.matmul(x, ad.transpose(w))
        if self.params.bias is not None:
            y = ad.add_bias(y, self.params.bias, axis=1)
        return y


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 4, stride: int = 2, pad: int = 1,
                 bias: bool = True, sn: bool = False, rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_channels, self.out_features = in_channels, out_channels
        self.stride, self.pad = stride, pad
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__((out_channels, in_channels, kernel, kernel), bias, sn, rng, dtype, out_channels)

    def apply(self, x: Tensor, w: Tensor) -> Tensor:
        y = ad.conv2d(x, w, self.stride, self.pad)
        if self.params.bias is not None:
            y = ad.add_bias(y, self.params.bias, axis=1)
        return y


class ConvTranspose2d(Layer):
    """Weight stored (in, out, k, k), the conv2d layout of the adjoint map."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 4, stride: int = 2, pad: int = 1,
                 bias: bool = True, sn: bool = False, rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_channels, self.out_features = in_channels, out_channels
        self.stride, self.pad = stride, pad
        rng = rng if rng is not None else np.random.default_rng(0)
        # sn views the kernel as in x (out*k*k), so u lives in the in-channel space
        super().__init__((in_channels, out_channels, kernel, kernel), bias, sn, rng, dtype, in_channels)

    def apply(self, x: Tensor, w: Tensor) -> Tensor:
        y = ad.conv2d_transposed(x, w, self.stride, self.pad)
        if self.params.bias is not None:
            y = ad.add_bias(y, self.params.bias, axis=1)
        return y

