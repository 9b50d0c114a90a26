"""Waveform I/O and the sound-feature pipelines used as generator conditions.

Four feature kinds are supported: power spectrogram, log mel filterbank
(fbank), MFCC, and a precomputed 256-d embedding loaded from disk. A feature
sequence is collapsed into a single condition vector by averaging over time.
"""

from __future__ import annotations

import logging
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

logger = logging.getLogger(__name__)

FeatureKind = Literal["spectrogram", "fbank", "mfcc", "embedding"]
FEATURE_KINDS = ("spectrogram", "fbank", "mfcc", "embedding")
EMBEDDING_DIM = 256
EMBEDDING_MAGIC = b"SNE1"
LOG_FLOOR = 1e-10


class AudioFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 22050
    clip_fraction: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("waveform samples exceed [-1, 1]; use scale_volume or normalize first")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray
    kind: str
    frame_hop_s: float = 0.0

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.shape[0] < 1:
            raise ValueError("feature sequence needs at least one frame")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SoundCondition:
    vector: np.ndarray
    kind: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("condition vector is not finite")


@dataclass
class FeatureConfig:
    """Analysis settings for condition vectors."""

    kind: str = "fbank"
    sample_rate: int = 22050
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 40
    n_ceps: int = 13
    f_min: float = 0.0
    f_max: float | None = None

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}; expected one of {FEATURE_KINDS}")

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_ms * 1e-3 * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * 1e-3 * self.sample_rate))

    @property
    def fft_size(self) -> int:
        return next_pow2(self.frame_length)

    @property
    def dim(self) -> int:
        return {
            "spectrogram": self.fft_size // 2 + 1,
            "fbank": self.n_mels,
            "mfcc": self.n_ceps,
            "embedding": EMBEDDING_DIM,
        }[self.kind]


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


# -- WAV I/O -------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            if channels != 1:
                raise AudioFormatError(f"{path}: expected mono audio, got {channels} channels")
            if width != 2:
                raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
            raw = fh.readframes(n)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise AudioFormatError(f"{path}: no samples")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


# -- feature pipeline ------------------------------------------------------------

def frame_and_window(w: Waveform, frame_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Slice into Hann-windowed frames, shape (T, frame_length).

    T = 1 + floor((len - frame) / hop); a trailing partial frame is dropped.
    """
    if not frame_ms >= hop_ms > 0:
        raise ValueError("need frame_ms >= hop_ms > 0")
    frame = int(round(frame_ms * 1e-3 * w.sample_rate))
    hop = int(round(hop_ms * 1e-3 * w.sample_rate))
    if len(w) < frame:
        raise ValueError(f"waveform of {len(w)} samples is shorter than one {frame}-sample frame")
    n_frames = 1 + (len(w) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    # periodic=False Hann, matching numpy.hanning
    return w.samples[idx] * np.hanning(frame)[None, :]


def power_spectrogram(frames: np.ndarray, fft_size: int | None = None, hop_s: float = 0.0) -> FeatureSequence:
    """|FFT|^2 of each frame, zero-padded to the next power of two."""
    frames = np.atleast_2d(frames)
    n = fft_size or next_pow2(frames.shape[1])
    spec = np.abs(np.fft.rfft(frames, n=n, axis=1)) ** 2
    return FeatureSequence(spec, "spectrogram", hop_s)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int, f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_mels, fft_size // 2 + 1).

    Triangles are evaluated in continuous frequency on the bin centers, so
    neighbouring filters overlap and the weights cover [f_min, f_max].
    """
    f_max = sample_rate / 2 if f_max is None else f_max
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2}")
    n_bins = fft_size // 2 + 1
    if n_mels < 1 or n_mels > n_bins - 2:
        raise ValueError(f"{n_mels} mel filters exceed the {n_bins} resolvable bins")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_bins) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def fbank(spec: FeatureSequence, n_mels: int = 40, f_min: float = 0.0, f_max: float | None = None,
          sample_rate: int = 22050) -> FeatureSequence:
    if spec.kind != "spectrogram":
        raise ValueError("fbank expects a power spectrogram")
    fft_size = 2 * (spec.dim - 1)
    fb = mel_filterbank(n_mels, fft_size, sample_rate, f_min, f_max)
    return FeatureSequence(np.log(LOG_FLOOR + spec.frames @ fb.T), "fbank", spec.frame_hop_s)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k holds coefficient k."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def mfcc(fb: FeatureSequence, n_ceps: int = 13) -> FeatureSequence:
    if fb.kind != "fbank":
        raise ValueError("mfcc expects log-mel (fbank) features")
    if n_ceps > fb.dim:
        raise ValueError(f"n_ceps={n_ceps} exceeds n_mels={fb.dim}")
    return FeatureSequence(fb.frames @ dct_matrix(fb.dim)[:n_ceps].T, "mfcc", fb.frame_hop_s)


# -- embedding files ---------------------------------------------------------------

def write_embedding_sequence(path, frames: np.ndarray) -> None:
    frames = np.atleast_2d(np.asarray(frames, dtype="<f4"))
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC + struct.pack("<II", t, d) + frames.tobytes())


def read_embedding_file(path) -> np.ndarray:
    """Raw (T, d) float32 matrix from a SNE1 file, any d."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != EMBEDDING_MAGIC:
        raise AudioFormatError(f"{path}: not an embedding file (bad magic)")
    t, d = struct.unpack("<II", raw[4:12])
    if t < 1 or d < 1:
        raise AudioFormatError(f"{path}: empty embedding header (T={t}, d={d})")
    if len(raw) != 12 + 4 * t * d:
        raise AudioFormatError(f"{path}: expected {t}x{d} floats, file size is {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(t, d).copy()


def load_embedding_sequence(path, dim: int = EMBEDDING_DIM) -> FeatureSequence:
    frames = read_embedding_file(path)
    if frames.shape[1] != dim:
        raise AudioFormatError(f"{path}: embedding dimension {frames.shape[1]} != {dim}")
    return FeatureSequence(frames.astype(np.float64), "embedding")


# -- conditions --------------------------------------------------------------------

def average_condition(f: FeatureSequence) -> SoundCondition:
    return SoundCondition(f.frames.sum(axis=0) / f.n_frames, f.kind)


def scale_volume(w: Waveform, factor: float) -> Waveform:
    """Multiply by ``factor`` and clip to [-1, 1]; the clipped share is recorded."""
    if factor <= 0:
        raise ValueError("volume factor must be positive")
    scaled = w.samples * factor
    clipped = np.abs(scaled) > 1.0
    frac = float(clipped.mean())
    if frac > 0:
        logger.warning("scale_volume(%.3g) clipped %.2f%% of samples", factor, 100 * frac)
    return Waveform(np.clip(scaled, -1.0, 1.0), w.sample_rate, clip_fraction=frac)


def extract_features(w: Waveform, cfg: FeatureConfig) -> FeatureSequence:
    """Featurize a waveform per ``cfg`` (not valid for the embedding kind)."""
    if cfg.kind == "embedding":
        raise ValueError("embedding features are loaded from files, not computed")
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != configured {cfg.sample_rate}; resampling is not supported")
    frames = frame_and_window(w, cfg.frame_ms, cfg.hop_ms)
    spec = power_spectrogram(frames, cfg.fft_size, cfg.hop_ms * 1e-3)
    if cfg.kind == "spectrogram":
        return spec
    fb = fbank(spec, cfg.n_mels, cfg.f_min, cfg.f_max, cfg.sample_rate)
    if cfg.kind == "fbank":
        return fb
    return mfcc(fb, cfg.n_ceps)


def condition_from_waveform(w: Waveform, cfg: FeatureConfig) -> SoundCondition:
    return average_condition(extract_features(w, cfg))
