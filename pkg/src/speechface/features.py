"""Speech-feature ingestion: portable .sft files, MFCC baseline, and the
frame-rate adjustment that aligns feature frames one-to-one with mesh frames."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft

from .mesh import FileFormatError

SFT_MAGIC = b"SFT1"


class Provenance(enum.IntEnum):
    PRETRAINED_EXPORT = 0
    MFCC = 1
    SYNTHETIC = 2


class FrameRateError(ValueError):
    """Feature frame rate is lower than the target mesh frame rate."""


@dataclass
class FeatureSequence:
    """T_X x B speech-feature matrix at a source frame rate."""

    data: np.ndarray
    fps: float
    provenance: Provenance = Provenance.SYNTHETIC

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature matrix must be (T_X >= 1, B >= 1), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("feature matrix contains non-finite values")
        if not (self.fps > 0):
            raise ValueError(f"fps must be positive, got {self.fps}")
        self.provenance = Provenance(self.provenance)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class AdjustedFeatures:
    """Features resampled and reshaped to one row per mesh frame, width k_ceil * B."""

    data: np.ndarray
    k_ceil: int


@dataclass
class AudioWaveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")


def resample_rows(data: np.ndarray, num_rows: int) -> np.ndarray:
    """Linearly interpolate rows along time to num_rows, endpoints aligned."""
    t_in = data.shape[0]
    if num_rows == t_in:
        return data.copy()
    if t_in == 1:
        return np.repeat(data, num_rows, axis=0)
    src = np.linspace(0.0, t_in - 1.0, num_rows)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, t_in - 1)
    frac = (src - lo)[:, None]
    return data[lo] * (1.0 - frac) + data[hi] * frac


def input_representation_adjustment(f: FeatureSequence, mesh_fps: float,
                                    num_mesh_frames: int) -> AdjustedFeatures:
    """Align T_X feature frames to exactly num_mesh_frames rows of width ceil(k) * B.

    k = feature fps / mesh fps. When k is a positive integer and the lengths match
    exactly, the adjustment is a pure reshape (values untouched); otherwise rows are
    linearly resampled to ceil(k) * num_mesh_frames first.
    """
    if num_mesh_frames < 1:
        raise ValueError(f"need at least one mesh frame, got {num_mesh_frames}")
    if mesh_fps > f.fps:
        raise FrameRateError(
            f"mesh fps {mesh_fps} exceeds feature fps {f.fps}; cannot downsample meshes")
    k = f.fps / mesh_fps
    k_ceil = math.ceil(k - 1e-9)
    k_is_integer = abs(k - round(k)) < 1e-9
    if k_is_integer and f.num_frames == round(k) * num_mesh_frames:
        data = f.data.reshape(num_mesh_frames, round(k) * f.width).copy()
        return AdjustedFeatures(data=data, k_ceil=round(k))
    data = resample_rows(f.data, k_ceil * num_mesh_frames)
    return AdjustedFeatures(data=data.reshape(num_mesh_frames, k_ceil * f.width),
                            k_ceil=k_ceil)


# ---------------------------------------------------------------------------
# MFCC baseline

@dataclass
class MfccConfig:
    mesh_fps: float = 25.0          # hop is chosen so feature fps == 2 * mesh_fps
    num_filters: int = 26
    num_coefficients: int = 13
    window_seconds: float = 0.025
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on a mel-spaced grid from 0 Hz to Nyquist."""
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), num_filters + 2)
    hz_points = mel_to_hz(mel_points)
    bins = hz_points / (sample_rate / 2.0) * (n_fft // 2)
    fb = np.zeros((num_filters, n_fft // 2 + 1))
    for i in range(num_filters):
        left, center, right = bins[i], bins[i + 1], bins[i + 2]
        idx = np.arange(n_fft // 2 + 1, dtype=np.float64)
        rising = (idx - left) / max(center - left, 1e-12)
        falling = (right - idx) / max(right - center, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def compute_mfcc(a: AudioWaveform, config: MfccConfig | None = None) -> FeatureSequence:
    """Classic MFCC pipeline over pad-to-fill frames.

    The hop is 1 / (2 * mesh_fps) so the output feature rate is exactly twice the
    mesh rate, keeping the adjustment ratio at k = 2.
    """
    config = config or MfccConfig()
    if a.sample_rate < 8000:
        raise ValueError(f"sample rate {a.sample_rate} too low for speech MFCC (need >= 8000)")
    sr = a.sample_rate
    win = round(config.window_seconds * sr)
    hop = round(sr / (2.0 * config.mesh_fps))
    n = a.samples.size
    if n < win:
        raise ValueError(f"audio too short: {n} samples < one {win}-sample window")

    emphasized = np.empty_like(a.samples)
    emphasized[0] = a.samples[0]
    emphasized[1:] = a.samples[1:] - config.pre_emphasis * a.samples[:-1]

    num_frames = 1 + math.ceil((n - win) / hop)
    padded = np.zeros((num_frames - 1) * hop + win)
    padded[:n] = emphasized
    idx = np.arange(win)[None, :] + hop * np.arange(num_frames)[:, None]
    frames = padded[idx] * np.hamming(win)

    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    spectrum = np.abs(rfft(frames, n=n_fft, axis=1))
    fb = mel_filterbank(config.num_filters, n_fft, sr)
    energies = spectrum @ fb.T
    log_energies = np.log(np.maximum(energies, config.log_floor))
    coeffs = dct(log_energies, type=2, norm="ortho", axis=1)[:, :config.num_coefficients]
    return FeatureSequence(data=coeffs, fps=2.0 * config.mesh_fps, provenance=Provenance.MFCC)


# ---------------------------------------------------------------------------
# .sft file format

def save_features(f: FeatureSequence, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(SFT_MAGIC)
        fh.write(struct.pack("<IIfB", f.num_frames, f.width, f.fps, int(f.provenance)))
        fh.write(f.data.astype("<f4").tobytes())


def load_features(path) -> FeatureSequence:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) != 4 or magic != SFT_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {SFT_MAGIC!r}")
        header = fh.read(13)
        if len(header) != 13:
            raise FileFormatError(
                f"{path}: truncated header at offset 4: expected 13 bytes, got {len(header)}")
        t, b, fps, prov = struct.unpack("<IIfB", header)
        expected = t * b * 4
        payload = fh.read(expected)
        if len(payload) != expected:
            raise FileFormatError(
                f"{path}: truncated payload at offset 17: expected {expected} bytes, "
                f"got {len(payload)}")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, b)
    return FeatureSequence(data=data, fps=float(fps), provenance=Provenance(prov))
