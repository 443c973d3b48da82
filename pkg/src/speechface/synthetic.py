"""Procedural desk-scale datasets with a known feature-to-mesh mapping.

The real capture corpus is access-restricted, so end-to-end verification runs on
generated data: smooth random feature signals, random per-subject templates, and
ground-truth frames produced by a recorded nonlinear mapping the tests can query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSequence, Provenance, input_representation_adjustment
from .mesh import MeshSequence, TemplateFace
from .training import DataItem

EMOTIONS = ("neutral", "expressive")


@dataclass
class SyntheticSpec:
    num_vertices: int = 50
    frames_per_sequence: int = 40
    num_sequences: int = 20
    num_subjects: int = 2
    feature_width: int = 16
    feature_fps: float = 50.0
    mesh_fps: float = 25.0
    seed: int = 0
    emotion_effect_scale: float = 5.0   # mm of additive upper-face deformation
    speech_effect_scale: float = 5.0    # mm scale of speech-driven displacement
    mapping_dim: int = 8                # latent width of the nonlinear mapping

    def __post_init__(self):
        for name in ("num_vertices", "frames_per_sequence", "num_sequences",
                     "num_subjects", "feature_width", "mapping_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.feature_fps <= 0 or self.mesh_fps <= 0 or self.mesh_fps > self.feature_fps:
            raise ValueError("need 0 < mesh_fps <= feature_fps")
        if self.emotion_effect_scale < 0:
            raise ValueError("emotion_effect_scale must be >= 0")

    @property
    def k_ceil(self) -> int:
        return math.ceil(self.feature_fps / self.mesh_fps - 1e-9)

    def upper_face_indices(self) -> np.ndarray:
        # designated "emotion-sensitive" subset: first ceil(V/3) vertices, by convention
        return np.arange(math.ceil(self.num_vertices / 3))


@dataclass
class SubjectMapping:
    template: TemplateFace
    latent_map: np.ndarray      # (mapping_dim, k_ceil * B)
    output_map: np.ndarray      # (3V, mapping_dim)
    emotion_offset: np.ndarray  # (V, 3); zero outside the upper-face subset


@dataclass
class SyntheticMapping:
    """The recorded ground-truth mapping, queryable as an oracle in tests."""

    spec: SyntheticSpec
    subjects: dict[str, SubjectMapping] = field(default_factory=dict)

    def apply(self, subject: str, features: FeatureSequence, emotion: str) -> MeshSequence:
        m = self.subjects[subject]
        adjusted = input_representation_adjustment(
            features, self.spec.mesh_fps, self.spec.frames_per_sequence)
        latent = np.tanh(adjusted.data @ m.latent_map.T)
        flat = latent @ m.output_map.T
        frames = flat.reshape(-1, self.spec.num_vertices, 3) + m.template.vertices
        if emotion == "expressive":
            frames = frames + m.emotion_offset
        return MeshSequence(frames=frames, fps=self.spec.mesh_fps)


def _smooth_signal(rng: np.random.Generator, num_frames: int, width: int) -> np.ndarray:
    """Sum of a few random low-frequency sinusoids per channel."""
    t = np.arange(num_frames)[:, None, None] / num_frames
    freqs = rng.uniform(0.5, 4.0, size=(1, width, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(1, width, 3))
    amps = rng.uniform(0.3, 1.0, size=(1, width, 3))
    return (amps * np.sin(2.0 * np.pi * freqs * t + phases)).sum(axis=2)


def generate(spec: SyntheticSpec) -> tuple[list[DataItem], SyntheticMapping]:
    """Deterministic dataset of (features, subject, emotion, template, mesh) items."""
    rng = np.random.default_rng(spec.seed)
    mapping = SyntheticMapping(spec=spec)
    upper = spec.upper_face_indices()
    in_width = spec.k_ceil * spec.feature_width

    for s in range(spec.num_subjects):
        subject = f"subject{s:02d}"
        extents = rng.uniform(80.0, 160.0, size=3)
        vertices = rng.uniform(-0.5, 0.5, size=(spec.num_vertices, 3)) * extents
        latent_map = rng.normal(0.0, 1.0 / np.sqrt(in_width),
                                size=(spec.mapping_dim, in_width))
        output_map = rng.normal(0.0, spec.speech_effect_scale / np.sqrt(spec.mapping_dim),
                                size=(3 * spec.num_vertices, spec.mapping_dim))
        directions = rng.normal(size=(upper.size, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        emotion_offset = np.zeros((spec.num_vertices, 3))
        emotion_offset[upper] = spec.emotion_effect_scale * directions
        mapping.subjects[subject] = SubjectMapping(
            template=TemplateFace(vertices=vertices, subject_id=subject),
            latent_map=latent_map,
            output_map=output_map,
            emotion_offset=emotion_offset,
        )

    items = []
    t_x = round(spec.frames_per_sequence * spec.feature_fps / spec.mesh_fps)
    for i in range(spec.num_sequences):
        subject = f"subject{i % spec.num_subjects:02d}"
        emotion = EMOTIONS[(i // spec.num_subjects) % len(EMOTIONS)]
        features = FeatureSequence(
            data=_smooth_signal(rng, t_x, spec.feature_width),
            fps=spec.feature_fps,
            provenance=Provenance.SYNTHETIC,
        )
        gt = mapping.apply(subject, features, emotion)
        items.append(DataItem(
            features=features,
            subject=subject,
            emotion=emotion,
            template=mapping.subjects[subject].template,
            gt=gt,
        ))
    return items, mapping
