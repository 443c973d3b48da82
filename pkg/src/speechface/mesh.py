"""Mesh sequence data types, per-subject normalization, and vertex-error metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MSQ_MAGIC = b"MSQ1"
TPL_MAGIC = b"TPL1"


class ShapeMismatchError(ValueError):
    """Two mesh objects disagree on frame count or vertex count."""


class DegenerateAxisError(ValueError):
    """A neutral face has zero extent along some axis; normalization would divide by zero."""


class FileFormatError(ValueError):
    """A binary mesh/template/feature file is malformed."""


@dataclass
class MeshSequence:
    """T x V x 3 vertex positions over time, plus the capture frame rate."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ShapeMismatchError(f"frames must be (T, V, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ShapeMismatchError(f"need T >= 1 and V >= 1, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("mesh sequence contains non-finite values")
        if not (self.fps > 0):
            raise ValueError(f"fps must be positive, got {self.fps}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.frames.shape[1]


@dataclass
class TemplateFace:
    """A subject's neutral-expression mesh (V x 3)."""

    vertices: np.ndarray
    subject_id: str

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ShapeMismatchError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if not np.isfinite(self.vertices).all():
            raise ValueError("template contains non-finite values")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass
class NormalizationStats:
    """Per-axis mean and extent of a subject's neutral face."""

    mean: np.ndarray
    range: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.range = np.asarray(self.range, dtype=np.float64).reshape(3)
        if not (self.range > 0).all():
            raise DegenerateAxisError(f"range must be positive on every axis, got {self.range}")


def compute_normalization_stats(template: TemplateFace) -> NormalizationStats:
    """Per-axis mean and (max - min) extent of the neutral face.

    Raises DegenerateAxisError when the face has zero extent along any axis.
    """
    v = template.vertices
    if v.shape[0] < 2:
        raise DegenerateAxisError("need at least 2 vertices to compute an extent")
    mean = v.mean(axis=0)
    extent = v.max(axis=0) - v.min(axis=0)
    flat = np.flatnonzero(extent == 0.0)
    if flat.size:
        raise DegenerateAxisError(
            f"neutral face of subject {template.subject_id!r} is flat along axes {flat.tolist()}"
        )
    return NormalizationStats(mean=mean, range=extent)


def normalize(coords: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """(c - mean) / range per axis; works on any (..., 3) array."""
    coords = np.asarray(coords, dtype=np.float64)
    return (coords - stats.mean) / stats.range


def denormalize(coords: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Exact inverse of normalize."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords * stats.range + stats.mean


def normalize_sequence(seq: MeshSequence, stats: NormalizationStats) -> MeshSequence:
    return MeshSequence(frames=normalize(seq.frames, stats), fps=seq.fps)


def denormalize_sequence(seq: MeshSequence, stats: NormalizationStats) -> MeshSequence:
    return MeshSequence(frames=denormalize(seq.frames, stats), fps=seq.fps)


def normalize_template(tpl: TemplateFace, stats: NormalizationStats) -> TemplateFace:
    return TemplateFace(vertices=normalize(tpl.vertices, stats), subject_id=tpl.subject_id)


def mean_face_vertex_error(pred: list[MeshSequence] | MeshSequence,
                           gt: list[MeshSequence] | MeshSequence) -> float:
    """Mean Euclidean vertex distance, averaged over vertices, then frames, then sequences.

    Sequences are weighted equally regardless of length.
    """
    if isinstance(pred, MeshSequence):
        pred = [pred]
    if isinstance(gt, MeshSequence):
        gt = [gt]
    if len(pred) != len(gt):
        raise ShapeMismatchError(f"got {len(pred)} predicted vs {len(gt)} ground-truth sequences")
    if not pred:
        raise ShapeMismatchError("no sequences given")
    per_sequence = []
    for p, g in zip(pred, gt):
        if p.frames.shape != g.frames.shape:
            raise ShapeMismatchError(
                f"sequence shape mismatch: {p.frames.shape} vs {g.frames.shape}")
        dist = np.linalg.norm(p.frames - g.frames, axis=2)  # (T, V)
        per_sequence.append(dist.mean(axis=1).mean())
    return float(np.mean(per_sequence))


def vertex_difference_heatmap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-vertex distance between two frames, scaled so the largest distance is 1.

    Identical frames map to all zeros (rather than 0/0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ShapeMismatchError(f"frames must share a (V, 3) shape, got {a.shape} vs {b.shape}")
    dist = np.linalg.norm(a - b, axis=1)
    peak = dist.max()
    if peak == 0.0:
        return np.zeros_like(dist)
    return dist / peak


# ---------------------------------------------------------------------------
# binary file formats

def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FileFormatError(
            f"{path}: truncated while reading {what}: expected {n} bytes, got {len(buf)}")
    return buf


def save_mesh_sequence(seq: MeshSequence, path) -> None:
    path = Path(path)
    t, v, _ = seq.frames.shape
    with open(path, "wb") as fh:
        fh.write(MSQ_MAGIC)
        fh.write(struct.pack("<IIf", t, v, seq.fps))
        fh.write(seq.frames.astype("<f4").tobytes())


def load_mesh_sequence(path) -> MeshSequence:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic at offset 0")
        if magic != MSQ_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MSQ_MAGIC!r}")
        t, v, fps = struct.unpack("<IIf", _read_exact(fh, 12, path, "header at offset 4"))
        payload = _read_exact(fh, t * v * 3 * 4, path, f"{t}x{v}x3 f32 payload at offset 16")
        frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, v, 3)
    return MeshSequence(frames=frames, fps=float(fps))


def save_template(tpl: TemplateFace, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TPL_MAGIC)
        fh.write(struct.pack("<I", tpl.num_vertices))
        fh.write(tpl.vertices.astype("<f4").tobytes())


def load_template(path, subject_id: str | None = None) -> TemplateFace:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic at offset 0")
        if magic != TPL_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {TPL_MAGIC!r}")
        (v,) = struct.unpack("<I", _read_exact(fh, 4, path, "vertex count at offset 4"))
        payload = _read_exact(fh, v * 3 * 4, path, f"{v}x3 f32 payload at offset 8")
        vertices = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(v, 3)
    if subject_id is None:
        subject_id = path.stem
    return TemplateFace(vertices=vertices, subject_id=subject_id)


def save_stats(stats: NormalizationStats, path) -> None:
    Path(path).write_text(
        json.dumps({"mean": stats.mean.tolist(), "range": stats.range.tolist()}),
        encoding="utf-8")


def load_stats(path) -> NormalizationStats:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return NormalizationStats(mean=np.array(obj["mean"]), range=np.array(obj["range"]))
