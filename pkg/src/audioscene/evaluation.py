"""Scoring generated images: a local evaluation classifier, Inception score,
conditional accuracy, and the volume probe."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import checkpoint
from .audio import FeatureConfig, Waveform, condition_from_waveform, scale_volume
from .data import BACKGROUND_RGB, object_area, to_uint8
from .layers import Conv2d, Linear
from .losses import nll
from .training import Adam

logger = logging.getLogger(__name__)

POSTERIOR_FLOOR = 1e-12
CLF_KIND = "eval_classifier"
ACCURACY_GATE = 0.9


class GateError(RuntimeError):
    """The evaluation classifier is not accurate enough to score with."""


# -- evaluation classifier --------------------------------------------------------

@dataclass
class ClassifierConfig:
    n_classes: int
    image_size: int = 32
    channels: tuple[int, ...] = (16, 32)
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)


class EvalClassifier:
    """Small conv net (no spectral norm) mapping images to class log-probabilities."""

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng([cfg.seed, 7])
        self.cfg = cfg
        widths = (3,) + cfg.channels
        self.layers = {f"conv{i}": Conv2d(widths[i], widths[i + 1], 4, 2, 1, rng=rng) for i in range(len(cfg.channels))}
        self.layers["head"] = Linear(widths[-1], cfg.n_classes, rng=rng)
        # He-style init trains faster than the GAN default at this size
        for name, layer in self.layers.items():
            fan_in = int(np.prod(layer.params.weight.shape[1:]))
            layer.params.weight.data = (layer.params.weight.data / 0.02 * np.sqrt(2.0 / fan_in)).astype(np.float32)
        self.frozen = False
        self.held_out_accuracy: float | None = None

    def named_tensors(self) -> dict[str, ad.Tensor]:
        return {f"{ln}.{pn}": t for ln, layer in self.layers.items() for pn, t in layer.tensors().items()}

    def log_probs_tensor(self, x) -> ad.Tensor:
        h = ad.as_tensor(x)
        for i in range(len(self.cfg.channels)):
            h = ad.leaky_relu(self.layers[f"conv{i}"](h), 0.2)
        h = ad.mean(h, axis=(2, 3))
        return ad.log_softmax(self.layers["head"](h), axis=1)

    def predict_proba(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = [np.exp(self.log_probs_tensor(images[i:i + batch_size]).data.astype(np.float64))
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1)

    @property
    def version_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        meta = {"kind": CLF_KIND, "config": asdict(self.cfg), "held_out_accuracy": self.held_out_accuracy,
                "hash": self.version_hash}
        checkpoint.save(path, meta, {k: t.data for k, t in self.named_tensors().items()})

    @classmethod
    def load(cls, path) -> "EvalClassifier":
        meta, blobs = checkpoint.load(path)
        if meta.get("kind") != CLF_KIND:
            raise checkpoint.CheckpointError(f"{path} is not an evaluation classifier")
        clf = cls(ClassifierConfig(**meta["config"]))
        for name, t in clf.named_tensors().items():
            if name not in blobs or blobs[name].shape != t.shape:
                raise checkpoint.CheckpointError(f"{path}: missing or misshapen {name}")
            t.data = blobs[name].copy()
        clf.frozen, clf.held_out_accuracy = True, meta.get("held_out_accuracy")
        if clf.version_hash != meta.get("hash"):
            raise checkpoint.CheckpointError(f"{path}: classifier hash mismatch")
        return clf


def train_eval_classifier(train_images: np.ndarray, train_labels: np.ndarray, held_images: np.ndarray,
                          held_labels: np.ndarray, cfg: ClassifierConfig, gate: float = ACCURACY_GATE) -> EvalClassifier:
    """Fit on real images, then freeze; raises GateError below ``gate`` held-out accuracy."""
    train_labels = np.asarray(train_labels)
    if len(np.unique(train_labels)) < 2:
        logger.warning("evaluation classifier trained on a single class; scores will be degenerate")
    clf = EvalClassifier(cfg)
    opt = Adam(clf.named_tensors(), lr=cfg.lr, beta1=0.9, beta2=0.999)
    rng = np.random.default_rng([cfg.seed, 8])
    x = np.asarray(train_images, dtype=np.float32)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for lo in range(0, len(x), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = nll(clf.log_probs_tensor(x[idx]), train_labels[idx])
            opt.step(ad.backward(loss))
    clf.frozen = True
    acc = float(np.mean(clf.predict(held_images) == np.asarray(held_labels))) if len(held_images) else 0.0
    clf.held_out_accuracy = acc
    logger.info("evaluation classifier held-out accuracy %.3f", acc)
    if acc < gate:
        raise GateError(f"held-out accuracy {acc:.3f} is below the {gate:.2f} gate; refusing to score with it")
    return clf


# -- Inception score ----------------------------------------------------------------

@dataclass
class ScoreReport:
    folds: list[float]
    mean: float
    std: float
    n_images: int
    n_folds: int = 10
    clf_hash: str = ""
    per_class: dict[str, float] = field(default_factory=dict)

    def to_record(self) -> str:
        return json.dumps({"mean": self.mean, "std": self.std, "folds": self.folds, "n_images": self.n_images,
                           "clf_hash": self.clf_hash, "per_class": self.per_class}, sort_keys=True)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p_i || q) per row, natural log, 0 log 0 = 0, q floored."""
    q = np.maximum(q, POSTERIOR_FLOOR)
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe / q), 0.0).sum(axis=1)


def fold_score(probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    mean_kl = float(np.mean(kl_rows(probs, probs.mean(axis=0))))
    # rounding can leave tiny negative KL; the score is bounded to [1, K]
    return float(np.exp(min(max(mean_kl, 0.0), np.log(probs.shape[1]))))


def inception_score_from_probs(probs: np.ndarray, n_folds: int = 10, seed: int | None = 0) -> ScoreReport:
    """Seeded shuffle, ``n_folds`` equal contiguous folds (remainder dropped)."""
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    if n < n_folds:
        raise ValueError(f"need at least {n_folds} images for {n_folds} folds, got {n}")
    if seed is not None:
        probs = probs[np.random.default_rng(seed).permutation(n)]
    size = n // n_folds
    folds = [fold_score(probs[k * size:(k + 1) * size]) for k in range(n_folds)]
    return ScoreReport(folds, float(np.mean(folds)), float(np.std(folds)), n, n_folds)


def inception_score(images: np.ndarray, clf: EvalClassifier, n_folds: int = 10, seed: int | None = 0,
                    labels: np.ndarray | None = None, class_names: Sequence[str] | None = None) -> ScoreReport:
    probs = clf.predict_proba(images)
    report = inception_score_from_probs(probs, n_folds, seed)
    report.clf_hash = clf.version_hash
    if labels is not None:
        labels = np.asarray(labels)
        for c in np.unique(labels):
            sel = probs[labels == c]
            name = class_names[c] if class_names is not None else str(int(c))
            report.per_class[name] = fold_score(sel)
    return report


# -- conditional accuracy --------------------------------------------------------------

GenerateFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def generate_batched(generate: GenerateFn, conds: np.ndarray, z: np.ndarray, batch_size: int = 128) -> np.ndarray:
    return np.concatenate([generate(conds[i:i + batch_size], z[i:i + batch_size])
                           for i in range(0, len(conds), batch_size)])


def conditional_accuracy(generate: GenerateFn, conds: np.ndarray, sound_labels: np.ndarray, clf: EvalClassifier,
                         z: np.ndarray) -> float:
    """Share of generated images the classifier assigns to their conditioning sound label."""
    if len(conds) == 0:
        raise ValueError("conditional accuracy needs a non-empty test set")
    images = generate_batched(generate, np.asarray(conds), np.asarray(z))
    return float(np.mean(clf.predict(images) == np.asarray(sound_labels)))


# -- volume probe ------------------------------------------------------------------------

@dataclass
class ProbeResult:
    factors: list[float]
    images: np.ndarray  # (n_sounds, n_factors, 3, H, W)
    areas: np.ndarray  # (n_sounds, n_factors)
    clip_fractions: np.ndarray  # (n_sounds, n_factors)

    @property
    def median_areas(self) -> list[float]:
        return [float(v) for v in np.median(self.areas, axis=0)]

    def is_non_decreasing(self) -> bool:
        med = self.median_areas
        return all(b >= a for a, b in zip(med, med[1:]))

    def summary(self) -> dict:
        return {"factors": self.factors, "median_area": self.median_areas,
                "mean_area": [float(v) for v in self.areas.mean(axis=0)], "n_sounds": int(self.areas.shape[0]),
                "max_clip_fraction": float(self.clip_fractions.max()), "non_decreasing": self.is_non_decreasing()}


def volume_probe(generate: GenerateFn, waveforms: Sequence[Waveform], feature_cfg: FeatureConfig, z: np.ndarray,
                 factors: Sequence[float] = (0.5, 1.0, 2.0, 3.0), background=BACKGROUND_RGB) -> ProbeResult:
    """Generate each sound at several loudness factors with the same noise per sound.

    ``z`` is one noise row per sound (or a single row shared by all).
    """
    if any(f <= 0 for f in factors):
        raise ValueError("volume factors must be positive")
    z = np.atleast_2d(z)
    if len(z) == 1:
        z = np.repeat(z, len(waveforms), axis=0)
    rows, areas, clips = [], [], []
    for w, zi in zip(waveforms, z):
        scaled = [scale_volume(w, f) for f in factors]
        conds = np.stack([condition_from_waveform(sw, feature_cfg).vector for sw in scaled])
        imgs = generate(conds, np.repeat(zi[None], len(factors), axis=0))
        rows.append(imgs)
        areas.append([object_area(im, background) for im in imgs])
        clips.append([sw.clip_fraction for sw in scaled])
    return ProbeResult(list(map(float, factors)), np.stack(rows), np.array(areas), np.array(clips))


# -- image grids ---------------------------------------------------------------------------

def make_grid(rows: np.ndarray, sep: int = 2, sep_value: int = 255) -> np.ndarray:
    """(R, C, 3, H, W) images in [-1, 1] -> (H', W', 3) uint8 with ``sep``-pixel separators."""
    rows = np.asarray(rows)
    if rows.ndim == 4:
        rows = rows[None]
    r, c, _, h, w = rows.shape
    grid = np.full((r * h + (r + 1) * sep, c * w + (c + 1) * sep, 3), sep_value, dtype=np.uint8)
    for i in range(r):
        for j in range(c):
            y, x = sep + i * (h + sep), sep + j * (w + sep)
            grid[y:y + h, x:x + w] = to_uint8(rows[i, j])
    return grid


def save_grid(out_dir, tag: str, iteration: int, rows: np.ndarray) -> Path:
    path = Path(out_dir) / f"grid_{tag}_{iteration}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(make_grid(rows), "RGB").save(path, format="PNG")
    return path
