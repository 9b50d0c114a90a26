"""Paired sound/image manifests, classifier-agreement cleaning, and a synthetic dataset.

On-disk layout of a dataset root::

    root/audio/<id>.wav          mono PCM16
    root/images/<id>.png         RGB
    root/manifest/manifest.ndjson
    root/manifest/classes.json   class table + provenance
    root/manifest/synth.ndjson   per-example generation metadata (synthetic sets only)

Manifest paths are relative to the manifest file's directory.
"""

from __future__ import annotations

import colorsys
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .audio import FeatureConfig, Waveform, average_condition, extract_features, load_embedding_sequence, read_wav, write_wav
from .models import CLASS_NAMES

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("id", "audio_path", "image_path", "sound_label", "image_label", "split")
SPLITS = ("train", "test")

# Training pairs per class after cleaning, from the original corpus.
TABLE1_COUNTS = {
    "plane": 2803, "speedboat": 900, "guitar": 207, "piano": 1899, "drum": 259,
    "dog": 264, "dam": 584, "baseball": 1708, "soccer": 2077,
}

BACKGROUND_RGB = (40, 40, 40)
FOREGROUND_DISTANCE = 0.25


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairedExample:
    id: str
    audio_path: str
    image_path: str
    sound_label: int
    image_label: int
    split: str = "train"


@dataclass
class Manifest:
    examples: list[PairedExample]
    classes: tuple[str, ...] = CLASS_NAMES
    provenance: str = ""
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ManifestError("manifest ids must be unique")
        k = len(self.classes)
        for e in self.examples:
            if not (0 <= e.sound_label < k and 0 <= e.image_label < k):
                raise ManifestError(f"{e.id}: label outside [0, {k})")
            if e.split not in SPLITS:
                raise ManifestError(f"{e.id}: unknown split {e.split!r}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> "Manifest":
        return replace(self, examples=[e for e in self.examples if e.split == name])

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()


# -- manifest I/O ----------------------------------------------------------------

def write_manifest(m: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({k: getattr(e, k) for k in MANIFEST_FIELDS}, ensure_ascii=False) for e in m.examples]
    _atomic_write_text(path, "".join(line + "\n" for line in lines))
    _atomic_write_text(path.parent / "classes.json",
                       json.dumps({"classes": list(m.classes), "provenance": m.provenance}, indent=2) + "\n")
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    classes, provenance = CLASS_NAMES, ""
    table = path.parent / "classes.json"
    if table.is_file():
        meta = json.loads(table.read_text(encoding="utf-8"))
        classes, provenance = tuple(meta["classes"]), meta.get("provenance", "")
    examples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            examples.append(PairedExample(
                id=str(rec["id"]), audio_path=rec["audio_path"], image_path=rec["image_path"],
                sound_label=int(rec["sound_label"]), image_label=int(rec["image_label"]),
                split=rec.get("split", "train"),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad record ({exc})") from exc
    return Manifest(examples, classes, provenance, path.parent)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# -- label providers and cleaning --------------------------------------------------

LabelProvider = Mapping[str, int] | Callable[[PairedExample], int]


def read_label_sidecar(path) -> dict[str, int]:
    """Classifier outputs as newline-delimited {"id": ..., "label": ...} records."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[str(rec["id"])] = int(rec["label"])
    return out


def apply_label_providers(m: Manifest, sound: LabelProvider | None = None, image: LabelProvider | None = None) -> Manifest:
    """Replace sound/image labels with external classifier outputs."""

    def lookup(provider, e, current):
        if provider is None:
            return current
        if callable(provider):
            return int(provider(e))
        return int(provider[e.id]) if e.id in provider else current

    examples = [replace(e, sound_label=lookup(sound, e, e.sound_label), image_label=lookup(image, e, e.image_label))
                for e in m.examples]
    return replace(m, examples=examples)


@dataclass
class CleanReport:
    n_total: int
    n_kept: int
    n_discarded: int
    discard_fraction: float
    undefined: bool = False

    def summary(self) -> str:
        note = " (empty manifest, fraction undefined)" if self.undefined else ""
        return (f"kept {self.n_kept} / {self.n_total}, discarded {self.n_discarded} "
                f"({100 * self.discard_fraction:.1f}%){note}")


def clean(m: Manifest) -> tuple[Manifest, CleanReport]:
    """Drop every pair whose sound and image classifiers disagree."""
    kept = [e for e in m.examples if e.sound_label == e.image_label]
    n = len(m.examples)
    report = CleanReport(n, len(kept), n - len(kept), (n - len(kept)) / n if n else 0.0, undefined=n == 0)
    return replace(m, examples=kept), report


def load_class_counts(m: Manifest, side: str = "sound") -> dict[str, int]:
    counts = dict.fromkeys(m.classes, 0)
    for e in m.examples:
        label = e.sound_label if side == "sound" else e.image_label
        if not 0 <= label < len(m.classes):
            raise ManifestError(f"{e.id}: unknown class id {label}")
        counts[m.classes[label]] += 1
    return counts


def batch_iterator(items: Sequence, batch_size: int, seed: int, epoch: int) -> Iterator[list]:
    """One epoch of shuffled batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(items))
    for lo in range(0, len(order), batch_size):
        yield [items[i] for i in order[lo:lo + batch_size]]


def index_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]


# -- images ------------------------------------------------------------------------

def load_image(path, size: int | None = None) -> np.ndarray:
    """(3, H, W) float32 in [-1, 1]."""
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return (np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    return np.clip(np.round((np.asarray(x).transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(path, x: np.ndarray) -> None:
    Image.fromarray(to_uint8(x), "RGB").save(path, format="PNG")


def object_area(x: np.ndarray, background=BACKGROUND_RGB, threshold: float = FOREGROUND_DISTANCE) -> int:
    """Foreground pixel count: Euclidean colour distance from the background > threshold."""
    bg = np.asarray(background, dtype=np.float64) / 127.5 - 1.0
    dist = np.sqrt(((np.asarray(x, dtype=np.float64) - bg[:, None, None]) ** 2).sum(axis=0))
    return int((dist > threshold).sum())


# -- synthetic dataset ---------------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross", "hbar", "vbar", "hexagon")


@dataclass
class SynthSpec:
    """Recipe for a paired dataset whose sounds and images share a class and a loudness."""

    class_names: tuple[str, ...] = CLASS_NAMES
    train_counts: tuple[int, ...] | None = None
    n_train: int = 1070
    test_per_class: int = 28
    image_size: int = 32
    sample_rate: int = 22050
    duration_s: float = 0.5
    volume_range: tuple[float, float] = (0.04, 0.32)
    coupling: float = 1.0
    label_noise: float = 0.0
    noise_mix: float = 0.05
    base_radius: float = 0.17
    size_jitter: float = 0.04
    position_jitter: int = 2
    f_lo: float = 35.0
    f_hi: float = 9000.0

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.volume_range = tuple(float(v) for v in self.volume_range)
        if len(self.class_names) < 1 or len(self.class_names) > len(SHAPES):
            raise ValueError(f"between 1 and {len(SHAPES)} classes supported")
        if self.coupling < 0:
            raise ValueError("coupling coefficient must be >= 0")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label_noise must lie in [0, 1)")
        if not 0 < self.volume_range[0] < self.volume_range[1] <= 1:
            raise ValueError("volume_range must satisfy 0 < lo < hi <= 1")
        if self.train_counts is None:
            self.train_counts = default_train_counts(self.class_names, self.n_train)
        self.train_counts = tuple(int(c) for c in self.train_counts)
        if len(self.train_counts) != len(self.class_names):
            raise ValueError("train_counts needs one entry per class")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def carrier_centers(self) -> np.ndarray:
        """Geometric class centres, at least one octave apart."""
        n = self.n_classes
        if n == 1:
            return np.array([np.sqrt(self.f_lo * self.f_hi)])
        step = min(max(np.log2(self.f_hi / self.f_lo) / (n - 1), 1.0), 3.0)
        mid = np.sqrt(self.f_lo * self.f_hi)
        return mid * 2.0 ** (step * (np.arange(n) - (n - 1) / 2))

    def class_colors(self) -> np.ndarray:
        n = self.n_classes
        return np.array([[round(255 * c) for c in colorsys.hsv_to_rgb(k / n, 0.85, 0.95)] for k in range(n)],
                        dtype=np.uint8)

    def to_dict(self) -> dict:
        return asdict(self)


def default_train_counts(class_names: Sequence[str], n_train: int) -> tuple[int, ...]:
    """Per-class counts proportional to the original corpus where the class is known, else uniform."""
    if all(c in TABLE1_COUNTS for c in class_names):
        weights = np.array([TABLE1_COUNTS[c] for c in class_names], dtype=np.float64)
    else:
        weights = np.ones(len(class_names))
    return tuple(int(max(1, round(n_train * w / weights.sum()))) for w in weights)


BUILTIN_SPECS = {
    "table1": lambda: SynthSpec(),
    "smoke2": lambda: SynthSpec(class_names=("speedboat", "plane"), train_counts=(300, 300), test_per_class=50),
}


def synth_waveform(spec: SynthSpec, label: int, volume: float, rng: np.random.Generator) -> Waveform:
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    fc = spec.carrier_centers()[label] * 2.0 ** rng.uniform(-0.25, 0.25)
    tone = np.sin(2 * np.pi * fc * t + rng.uniform(0, 2 * np.pi))
    kind = label % 3
    if kind == 1:
        env = np.exp(-t / (0.3 * spec.duration_s))
    elif kind == 2:
        env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(4, 8) * t)
    else:
        env = np.ones(n)
    sig = tone * env + spec.noise_mix * rng.standard_normal(n)
    return Waveform(sig / np.max(np.abs(sig)) * volume, spec.sample_rate)


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.1 * r
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r))
    if shape == "hbar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.45 * r)
    if shape == "vbar":
        return (np.abs(dy) <= r) & (np.abs(dx) <= 0.45 * r)
    if shape == "hexagon":
        ax, ay = np.abs(dx), np.abs(dy)
        return (ay <= 0.87 * r) & (0.87 * ax + 0.5 * ay <= 0.87 * r)
    raise ValueError(f"unknown shape {shape!r}")


def synth_image(spec: SynthSpec, label: int, volume: float, rng: np.random.Generator) -> np.ndarray:
    """(H, W, 3) uint8 image: class shape in class colour on a solid background."""
    size = spec.image_size
    lo, hi = np.log(spec.volume_range[0]), np.log(spec.volume_range[1])
    loudness = (np.log(volume) - lo) / (hi - lo)
    r = size * spec.base_radius * (1 + spec.coupling * loudness) * (1 + rng.uniform(-spec.size_jitter, spec.size_jitter))
    j = spec.position_jitter
    cx, cy = size / 2 + rng.uniform(-j, j), size / 2 + rng.uniform(-j, j)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    img[_shape_mask(SHAPES[label], size, cx, cy, r)] = spec.class_colors()[label]
    return img


def synthesize_dataset(spec: SynthSpec, out_dir, seed: int = 0) -> Manifest:
    """Write audio, images, and manifest under ``out_dir``; deterministic per seed."""
    root = Path(out_dir)
    for sub in ("audio", "images", "manifest"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    k = spec.n_classes
    plan = []
    for split, counts in (("train", spec.train_counts), ("test", (spec.test_per_class,) * k)):
        labels = np.repeat(np.arange(k), counts)
        rng.shuffle(labels)
        plan += [(split, i, int(c)) for i, c in enumerate(labels)]
    examples, meta = [], []
    lo, hi = np.log(spec.volume_range[0]), np.log(spec.volume_range[1])
    for split, i, sound_label in plan:
        ex_id = f"{split}-{i:05d}"
        volume = float(np.exp(rng.uniform(lo, hi)))
        image_label = sound_label
        if k > 1 and rng.uniform() < spec.label_noise:
            image_label = int((sound_label + rng.integers(1, k)) % k)
        write_wav(root / "audio" / f"{ex_id}.wav", synth_waveform(spec, sound_label, volume, rng))
        img = synth_image(spec, image_label, volume, rng)
        Image.fromarray(img, "RGB").save(root / "images" / f"{ex_id}.png", format="PNG")
        examples.append(PairedExample(ex_id, f"../audio/{ex_id}.wav", f"../images/{ex_id}.png",
                                      sound_label, image_label, split))
        meta.append({"id": ex_id, "volume": volume})
    m = Manifest(examples, spec.class_names, f"synthetic seed={seed} spec={json.dumps(spec.to_dict(), sort_keys=True)}",
                 root / "manifest")
    write_manifest(m, root / "manifest" / "manifest.ndjson")
    _atomic_write_text(root / "manifest" / "synth.ndjson", "".join(json.dumps(r) + "\n" for r in meta))
    return m


def probe_volume(spec: SynthSpec, factors: Sequence[float]) -> float:
    """Base loudness placing every scaled copy inside the training volume range, centred in log space."""
    lo, hi = np.log(spec.volume_range)
    f_lo, f_hi = np.log(min(factors)), np.log(max(factors))
    if f_hi - f_lo > hi - lo:
        logger.warning("probe factors span more than the training volume range")
    return float(np.exp((lo + hi) / 2 - (f_lo + f_hi) / 2))


def probe_waveforms(spec: SynthSpec, n_per_class: int, volume: float, seed: int = 0) -> tuple[list[Waveform], np.ndarray]:
    """Fresh class sounds at a fixed loudness, for the volume probe."""
    rng = np.random.default_rng([seed, 17])
    labels = np.repeat(np.arange(spec.n_classes), n_per_class)
    return [synth_waveform(spec, int(c), volume, rng) for c in labels], labels


def read_synth_meta(manifest_path) -> dict[str, dict]:
    path = Path(manifest_path).parent / "synth.ndjson"
    return {r["id"]: r for r in map(json.loads, path.read_text().splitlines()) if r}


# -- arrays for training and evaluation ------------------------------------------------

@dataclass
class PairedArrays:
    ids: list[str]
    images: np.ndarray  # (N, 3, H, W) float32
    conditions: np.ndarray  # (N, d) float64, unscaled
    sound_labels: np.ndarray
    image_labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.ids)


def example_condition(m: Manifest, e: PairedExample, cfg: FeatureConfig, features_dir=None) -> np.ndarray:
    if features_dir is not None:
        return average_condition(load_embedding_sequence(Path(features_dir) / f"{e.id}.sne", cfg.dim)).vector
    if cfg.kind == "embedding":
        raise ValueError("embedding features need a features directory")
    return average_condition(extract_features(read_wav(m.resolve(e.audio_path)), cfg)).vector


def load_arrays(m: Manifest, cfg: FeatureConfig, image_size: int | None = None, features_dir=None,
                with_conditions: bool = True) -> PairedArrays:
    if not m.examples:
        raise ManifestError("no examples to load")
    images = np.stack([load_image(m.resolve(e.image_path), image_size) for e in m.examples])
    if with_conditions:
        conds = np.stack([example_condition(m, e, cfg, features_dir) for e in m.examples])
    else:
        conds = np.zeros((len(m), 0))
    return PairedArrays(
        ids=[e.id for e in m.examples], images=images, conditions=conds,
        sound_labels=np.array([e.sound_label for e in m.examples], dtype=np.int64),
        image_labels=np.array([e.image_label for e in m.examples], dtype=np.int64),
        n_classes=m.n_classes,
    )
