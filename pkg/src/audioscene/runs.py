"""Run configuration files and the run directory produced by a training job.

A run directory ``<out>/<run-id>/`` holds::

    config.txt       the resolved configuration, re-loadable as-is
    metrics.ndjson   one record per iteration
    checkpoints/     iter_<n>.sgck snapshots and final.sgck
    grids/           sample grids from fixed test conditions and noise
    report.txt       summary, plus scores when an evaluation classifier is given
"""

from __future__ import annotations

import configparser
import io
import json
import logging
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .audio import FeatureConfig
from .data import Manifest, PairedArrays, load_arrays, read_manifest
from .evaluation import EvalClassifier, generate_batched, inception_score, save_grid
from .losses import PRESETS, LossConfig, preset
from .models import ModelConfig
from .training import TrainConfig, Trainer

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """One or more configuration problems, all reported together."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class DataSection:
    manifest: str = ""
    # directory of precomputed <id>.sne condition files; empty computes features from audio
    features_dir: str = ""
    image_size: int = 64


@dataclass
class ModelSection:
    g_channels: tuple[int, ...] = (256, 128, 64, 32)
    d_channels: tuple[int, ...] = (32, 64, 128, 256)
    cond_embed_dim: int = 32
    leak: float = 0.2


@dataclass
class LossSection:
    preset: str = "table5-g"
    adversarial: str = "hinge"
    use_projection: bool = True
    use_aux_classifier: bool = True
    use_spectral_norm: bool = True
    gp_lambda: float = 10.0
    aux_weight: float = 1.0
    gp_step: float = 1e-3


@dataclass
class RunSection:
    out: str = "runs"
    run_id: str = ""
    grid_every: int = 100
    # 0 keeps only the final checkpoint
    checkpoint_every: int = 0
    clf: str = ""


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossSection = field(default_factory=LossSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def run_id(self) -> str:
        return self.run.run_id or f"{self.loss.preset}-seed{self.train.seed}"

    @property
    def run_dir(self) -> Path:
        return Path(self.run.out) / self.run_id

    def loss_config(self) -> LossConfig:
        return LossConfig(**{f.name: getattr(self.loss, f.name) for f in fields(LossConfig)})

    def model_config(self, cond_dim: int, n_classes: int) -> ModelConfig:
        m = self.model
        return ModelConfig(cond_dim=cond_dim, noise_dim=self.train.noise_dim, n_classes=n_classes,
                           image_size=self.data.image_size, g_channels=m.g_channels, d_channels=m.d_channels,
                           cond_embed_dim=m.cond_embed_dim, leak=m.leak)


SECTIONS = tuple(f.name for f in fields(RunConfig))


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default, hint):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "yes", "1")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or (default is None and "float" in str(hint)):
        return None if raw.lower() == "none" else float(raw)
    return raw


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _apply(cfg: RunConfig, values: dict[str, dict[str, str]], problems: list[str]) -> RunConfig:
    sections = {}
    for name in SECTIONS:
        section = getattr(cfg, name)
        hints = typing.get_type_hints(type(section))
        given = dict(values.get(name, {}))
        # a named preset expands first; explicit keys in the same section win
        if name == "loss" and "preset" in given:
            try:
                base = preset(given["preset"].strip())
                section = LossSection(preset=given["preset"].strip(),
                                      **{f.name: getattr(base, f.name) for f in fields(LossConfig)})
            except ValueError as exc:
                problems.append(f"[loss] preset: {exc}")
        known = {f.name: f for f in fields(section)}
        updates = {}
        for key, raw in given.items():
            if key not in known:
                problems.append(f"[{name}] unknown key {key!r}")
                continue
            if name == "loss" and key == "preset":
                continue
            try:
                updates[key] = _parse(raw, getattr(section, key), hints.get(key))
            except ValueError as exc:
                problems.append(f"[{name}] {key}: {exc}")
        try:
            sections[name] = replace(section, **updates)
        except (ValueError, TypeError) as exc:
            problems.append(f"[{name}] {exc}")
            sections[name] = section
    for name in values:
        if name not in SECTIONS:
            problems.append(f"unknown section [{name}]")
    return RunConfig(**sections)


def load_config(path=None, overrides: dict[str, dict[str, str]] | None = None,
                need_manifest: bool = True) -> RunConfig:
    """Defaults, then the config file, then command-line overrides."""
    problems: list[str] = []
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            text = Path(path).read_text(encoding="utf-8")
            parser.read_string(text, source=str(path))
        except (OSError, configparser.Error) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        cfg = _apply(cfg, {s: dict(parser[s]) for s in parser.sections()}, problems)
    if overrides:
        cfg = _apply(cfg, overrides, problems)
    problems += validate(cfg, need_manifest)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig, need_manifest: bool = True) -> list[str]:
    problems = []
    if cfg.loss.preset not in PRESETS:
        problems.append(f"[loss] preset {cfg.loss.preset!r} is not one of {sorted(PRESETS)}")
    if need_manifest:
        if not cfg.data.manifest:
            problems.append("[data] manifest is required")
        elif not Path(cfg.data.manifest).is_file():
            problems.append(f"[data] manifest {cfg.data.manifest} does not exist")
    if cfg.data.features_dir and not Path(cfg.data.features_dir).is_dir():
        problems.append(f"[data] features_dir {cfg.data.features_dir} is not a directory")
    if cfg.features.kind == "embedding" and not cfg.data.features_dir:
        problems.append("[features] kind = embedding needs [data] features_dir")
    if cfg.run.clf and not Path(cfg.run.clf).is_file():
        problems.append(f"[run] clf {cfg.run.clf} does not exist")
    if cfg.run.grid_every < 0 or cfg.run.checkpoint_every < 0:
        problems.append("[run] grid_every and checkpoint_every must be >= 0")
    try:
        cfg.loss_config()
    except ValueError as exc:
        problems.append(f"[loss] {exc}")
    try:
        cfg.model_config(cfg.features.dim, 2)
    except ValueError as exc:
        problems.append(f"[model] {exc}")
    return problems


# -- running ------------------------------------------------------------------------

def eval_noise(n: int, noise_dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 3]).standard_normal((n, noise_dim)).astype(np.float32)


def load_split(cfg: RunConfig, m: Manifest, split: str) -> PairedArrays:
    return load_arrays(m.split(split), cfg.features, cfg.data.image_size, cfg.data.features_dir or None)


def grid_examples(labels: np.ndarray, per_class: int = 2) -> np.ndarray:
    picks = [np.flatnonzero(labels == c)[:per_class] for c in np.unique(labels)]
    return np.concatenate(picks) if picks else np.zeros(0, int)


def score_generator(generate, test: PairedArrays, clf: EvalClassifier, noise_dim: int, seed: int,
                    class_names=None) -> dict:
    z = eval_noise(len(test), noise_dim, seed)
    images = generate_batched(generate, test.conditions, z)
    acc = float(np.mean(clf.predict(images) == test.sound_labels))
    report = inception_score(images, clf, seed=seed, labels=test.sound_labels, class_names=class_names)
    return {"conditional_accuracy": acc, "inception": report}


@dataclass
class RunResult:
    run_dir: Path
    trainer: Trainer
    log: list[dict]
    scores: dict | None


def build_trainer(cfg: RunConfig, manifest: Manifest | None = None) -> Trainer:
    """The trainer a run starts from, at iteration 0."""
    manifest = manifest or read_manifest(cfg.data.manifest)
    train_arr = load_split(cfg, manifest, "train")
    model_cfg = cfg.model_config(train_arr.conditions.shape[1], manifest.n_classes)
    extra = {"features": asdict(cfg.features), "classes": list(manifest.classes),
             "features_dir": cfg.data.features_dir}
    return Trainer(train_arr, model_cfg, cfg.train, cfg.loss_config(), extra_meta=extra)


def run_training(cfg: RunConfig) -> RunResult:
    manifest = read_manifest(cfg.data.manifest)
    trainer = build_trainer(cfg, manifest)
    test_arr = load_split(cfg, manifest, "test") if len(manifest.split("test")) else None

    run_dir = cfg.run_dir
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "grids").mkdir(exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    metrics_path = run_dir / "metrics.ndjson"
    metrics_path.write_text("", encoding="utf-8")

    gen = trainer.generate
    grid_conds = grid_z = None
    if test_arr is not None:
        grid_conds = test_arr.conditions[grid_examples(test_arr.sound_labels)]
        grid_z = np.random.default_rng([cfg.train.seed, 4]).standard_normal((4, cfg.train.noise_dim)).astype(np.float32)

    def on_iter(t: Trainer, record: dict) -> None:
        with metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        it = record["iter"]
        if grid_conds is not None and cfg.run.grid_every and it % cfg.run.grid_every == 0:
            rows = np.stack([gen(np.repeat(c[None], len(grid_z), axis=0), grid_z) for c in grid_conds])
            save_grid(run_dir / "grids", "train", it, rows)
        if cfg.run.checkpoint_every and it % cfg.run.checkpoint_every == 0:
            t.save(run_dir / "checkpoints" / f"iter_{it:06d}.sgck")

    log = trainer.train(callbacks=[on_iter], diagnostic_path=run_dir / "checkpoints" / "diverged.sgck")
    trainer.save(run_dir / "checkpoints" / "final.sgck")

    lines = [f"run_id: {cfg.run_id}", f"iterations: {trainer.iteration}", f"loss_preset: {cfg.loss.preset}"]
    if log:
        lines += [f"final_d_loss: {log[-1]['d_loss']:.6f}", f"final_g_loss: {log[-1]['g_loss']:.6f}"]
    scores = None
    if cfg.run.clf and test_arr is not None:
        clf = EvalClassifier.load(cfg.run.clf)
        scores = score_generator(gen, test_arr, clf, cfg.train.noise_dim, cfg.train.seed, manifest.classes)
        rep = scores["inception"]
        lines += [f"conditional_accuracy: {scores['conditional_accuracy']:.4f}",
                  f"inception_score: {rep.mean:.4f} +- {rep.std:.4f}",
                  f"score_report: {rep.to_record()}"]
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return RunResult(run_dir, trainer, log, scores)
