"""Log-mel filterbank features and global mean/variance normalization."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FBK_MAGIC = b"FBK1"


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    n_mels: int = 40
    frame_shift_ms: float = 10.0
    frame_len_ms: float = 25.0
    preemphasis: float = 0.97
    # energy floor before the natural log
    energy_floor: float = 1e-10
    fft_size: int | None = None

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_len_ms / 1000))

    @property
    def frame_shift(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000))

    @property
    def n_fft(self) -> int:
        if self.fft_size is not None:
            return self.fft_size
        return 1 << (self.frame_len - 1).bit_length()

    @property
    def log_floor(self) -> float:
        return float(np.log(self.energy_floor))


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    source_id: str = ""
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise FeatureError(f"feature matrix must be T x D with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise FeatureError(f"non-finite feature values in {self.source_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(config: FbankConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(config.sample_rate / 2), config.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(config: FbankConfig) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1), on the HTK mel scale."""
    n_bins = config.n_fft // 2 + 1
    freqs = np.arange(n_bins) * config.sample_rate / config.n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(config.sample_rate / 2), config.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, config: FbankConfig) -> int:
    if n_samples < config.frame_len:
        return 0
    return 1 + (n_samples - config.frame_len) // config.frame_shift


def extract_fbank(samples, config: FbankConfig = FbankConfig(), source_id: str = "") -> FeatureMatrix:
    """Natural-log mel energies, one row per 10 ms frame by default."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError("expected mono samples")
    T = num_frames(len(x), config)
    if T < 1:
        raise FeatureError(
            f"audio too short: {len(x)} samples, need at least {config.frame_len} for one frame"
        )
    L, S = config.frame_len, config.frame_shift
    idx = np.arange(L)[None, :] + S * np.arange(T)[:, None]
    frames = x[idx]
    if config.preemphasis:
        frames = np.concatenate(
            [frames[:, :1] * (1 - config.preemphasis), frames[:, 1:] - config.preemphasis * frames[:, :-1]],
            axis=1,
        )
    frames = frames * np.hamming(L)
    spec = np.fft.rfft(frames, n=config.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank(config).T
    return FeatureMatrix(np.log(np.maximum(energies, config.energy_floor)), source_id, config.frame_shift_ms)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise FeatureError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise FeatureError(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float64), rate


def write_wav(path: str | Path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples)), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def fbank_from_wav(path: str | Path, config: FbankConfig = FbankConfig(), source_id: str = "") -> FeatureMatrix:
    samples, rate = read_wav(path)
    if rate != config.sample_rate:
        raise FeatureError(f"{path}: sample rate {rate} does not match configured {config.sample_rate}")
    return extract_fbank(samples, config, source_id)


def write_features(path: str | Path, frames) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 2:
        raise FeatureError("feature container holds 2-D matrices")
    with open(path, "wb") as f:
        f.write(FBK_MAGIC)
        f.write(struct.pack("<II", *arr.shape))
        f.write(arr.tobytes())


def read_features(path: str | Path, source_id: str | None = None) -> FeatureMatrix:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FBK_MAGIC:
        raise FeatureError(f"{path}: bad magic {data[:4]!r}")
    T, D = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * T * D
    if len(data) != expected:
        raise FeatureError(f"{path}: expected {expected} bytes for {T}x{D}, got {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=12).reshape(T, D)
    return FeatureMatrix(frames.astype(np.float64), source_id if source_id is not None else str(path))


VARIANCE_FLOOR = 1e-10


@dataclass
class CMVNStats:
    """Per-dimension running sums for global normalization."""

    sum: np.ndarray
    sum_sq: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, dim: int) -> "CMVNStats":
        return cls(np.zeros(dim), np.zeros(dim), 0)

    @property
    def dim(self) -> int:
        return self.sum.shape[0]

    def merge(self, other: "CMVNStats") -> "CMVNStats":
        if other.dim != self.dim:
            raise FeatureError(f"cannot merge CMVN stats of dims {self.dim} and {other.dim}")
        return CMVNStats(self.sum + other.sum, self.sum_sq + other.sum_sq, self.count + other.count)

    @property
    def mean(self) -> np.ndarray:
        if self.count <= 0:
            raise FeatureError("CMVN stats have zero frame count")
        return self.sum / self.count

    @property
    def var(self) -> np.ndarray:
        m = self.mean
        return np.maximum(self.sum_sq / self.count - m * m, 0.0)

    def save(self, path: str | Path) -> None:
        np.savez(path, sum=self.sum, sum_sq=self.sum_sq, count=np.array(self.count))

    @classmethod
    def load(cls, path: str | Path) -> "CMVNStats":
        with np.load(path) as z:
            return cls(z["sum"].astype(np.float64), z["sum_sq"].astype(np.float64), int(z["count"]))


def accumulate_cmvn(stats: CMVNStats, feats: FeatureMatrix) -> CMVNStats:
    x = feats.frames
    if x.shape[1] != stats.dim:
        raise FeatureError(f"feature dim {x.shape[1]} does not match stats dim {stats.dim}")
    return stats.merge(CMVNStats(x.sum(axis=0), (x * x).sum(axis=0), x.shape[0]))


def apply_cmvn(feats: FeatureMatrix, stats: CMVNStats) -> FeatureMatrix:
    if feats.dim != stats.dim:
        raise FeatureError(f"feature dim {feats.dim} does not match stats dim {stats.dim}")
    scale = np.sqrt(np.maximum(stats.var, VARIANCE_FLOOR))
    return FeatureMatrix((feats.frames - stats.mean) / scale, feats.source_id, feats.frame_shift_ms)
