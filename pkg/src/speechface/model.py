"""Vertex decoder: stacked recurrent layers, identity/emotion conditioning, and
the linear projection to per-vertex displacements over a neutral template."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import AdjustedFeatures, FeatureSequence, input_representation_adjustment
from .mesh import FileFormatError, MeshSequence, ShapeMismatchError, TemplateFace

CKPT_MAGIC = b"FXH1"

CELL_TYPES = ("gru", "rnn", "lstm")


class InvalidOneHotError(ValueError):
    """A conditioning vector is not exactly one-hot."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class ModelConfig:
    input_width: int
    num_vertices: int
    subjects: list[str]
    emotions: list[str] = field(default_factory=lambda: ["expressive", "neutral"])
    hidden_size: int = 256
    num_layers: int = 2
    dropout_rate: float = 0.3
    cell_type: str = "gru"

    def __post_init__(self):
        if self.cell_type not in CELL_TYPES:
            raise ValueError(f"cell_type must be one of {CELL_TYPES}, got {self.cell_type!r}")
        if self.num_layers < 1:
            raise ValueError("need at least one recurrent layer")
        if self.input_width < 1 or self.num_vertices < 1 or self.hidden_size < 1:
            raise ValueError("input_width, num_vertices and hidden_size must be positive")
        if not self.subjects or not self.emotions:
            raise ValueError("need at least one subject and one emotion label")

    def to_dict(self) -> dict:
        return {
            "input_width": self.input_width,
            "num_vertices": self.num_vertices,
            "subjects": list(self.subjects),
            "emotions": list(self.emotions),
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "dropout_rate": self.dropout_rate,
            "cell_type": self.cell_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# per-cell parameter containers

@dataclass
class GruLayerParams:
    W_r: np.ndarray
    W_a: np.ndarray
    W_u: np.ndarray
    b_r: np.ndarray
    b_a: np.ndarray
    b_u: np.ndarray

    def tensors(self):
        yield "W_r", self.W_r
        yield "W_a", self.W_a
        yield "W_u", self.W_u
        yield "b_r", self.b_r
        yield "b_a", self.b_a
        yield "b_u", self.b_u


@dataclass
class RnnLayerParams:
    W: np.ndarray
    b: np.ndarray

    def tensors(self):
        yield "W", self.W
        yield "b", self.b


@dataclass
class LstmLayerParams:
    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def tensors(self):
        for name in ("W_f", "W_i", "W_o", "W_c", "b_f", "b_i", "b_o", "b_c"):
            yield name, getattr(self, name)


@dataclass
class ConditioningParams:
    W_S: np.ndarray
    b_S: np.ndarray
    W_E: np.ndarray
    b_E: np.ndarray

    def tensors(self):
        yield "W_S", self.W_S
        yield "b_S", self.b_S
        yield "W_E", self.W_E
        yield "b_E", self.b_E


@dataclass
class OutputLayerParams:
    W_out: np.ndarray
    b_out: np.ndarray

    def tensors(self):
        yield "W_out", self.W_out
        yield "b_out", self.b_out


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list
    cond: ConditioningParams
    out: OutputLayerParams

    @property
    def layer1(self):
        return self.layers[0]

    @property
    def layer2(self):
        return self.layers[1]

    def tensors(self):
        """Flat (name, array) view over every trainable tensor, fixed order."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.tensors():
                yield f"layer{i + 1}.{name}", arr
        for name, arr in self.cond.tensors():
            yield f"cond.{name}", arr
        for name, arr in self.out.tensors():
            yield f"out.{name}", arr

    def tensor_dict(self) -> dict[str, np.ndarray]:
        return dict(self.tensors())


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_layer(rng, cell_type: str, hidden: int, input_width: int):
    cols = hidden + input_width
    if cell_type == "gru":
        return GruLayerParams(
            W_r=_uniform(rng, (hidden, cols), cols),
            W_a=_uniform(rng, (hidden, cols), cols),
            W_u=_uniform(rng, (hidden, cols), cols),
            b_r=_uniform(rng, (hidden,), cols),
            b_a=_uniform(rng, (hidden,), cols),
            b_u=_uniform(rng, (hidden,), cols),
        )
    if cell_type == "rnn":
        return RnnLayerParams(W=_uniform(rng, (hidden, cols), cols),
                              b=_uniform(rng, (hidden,), cols))
    return LstmLayerParams(
        W_f=_uniform(rng, (hidden, cols), cols),
        W_i=_uniform(rng, (hidden, cols), cols),
        W_o=_uniform(rng, (hidden, cols), cols),
        W_c=_uniform(rng, (hidden, cols), cols),
        b_f=_uniform(rng, (hidden,), cols),
        b_i=_uniform(rng, (hidden,), cols),
        b_o=_uniform(rng, (hidden,), cols),
        b_c=_uniform(rng, (hidden,), cols),
    )


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded uniform initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor."""
    rng = np.random.default_rng(seed)
    h = config.hidden_size
    layers = []
    width = config.input_width
    for _ in range(config.num_layers):
        layers.append(_init_layer(rng, config.cell_type, h, width))
        width = h
    n_sub = len(config.subjects)
    n_emo = len(config.emotions)
    cond = ConditioningParams(
        W_S=_uniform(rng, (h, n_sub), n_sub),
        b_S=_uniform(rng, (h,), n_sub),
        W_E=_uniform(rng, (h, n_emo), n_emo),
        b_E=_uniform(rng, (h,), n_emo),
    )
    out_dim = 3 * config.num_vertices
    out = OutputLayerParams(W_out=_uniform(rng, (out_dim, h), h),
                            b_out=_uniform(rng, (out_dim,), h))
    return ModelParams(config=config, layers=layers, cond=cond, out=out)


# ---------------------------------------------------------------------------
# single-step cells

def gru_cell_step(p: GruLayerParams, a_prev: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """One gated-recurrent step; concatenation order is [state; input]."""
    z = np.concatenate([a_prev, x_t])
    r = sigmoid(p.W_r @ z + p.b_r)
    zc = np.concatenate([r * a_prev, x_t])
    c = np.tanh(p.W_a @ zc + p.b_a)
    u = sigmoid(p.W_u @ z + p.b_u)
    return u * c + (1.0 - u) * a_prev


def rnn_cell_step(p: RnnLayerParams, h_prev: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    return np.tanh(p.W @ np.concatenate([h_prev, x_t]) + p.b)


def lstm_cell_step(p: LstmLayerParams, state: tuple[np.ndarray, np.ndarray],
                   x_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h_prev, c_prev = state
    z = np.concatenate([h_prev, x_t])
    f = sigmoid(p.W_f @ z + p.b_f)
    i = sigmoid(p.W_i @ z + p.b_i)
    o = sigmoid(p.W_o @ z + p.b_o)
    g = np.tanh(p.W_c @ z + p.b_c)
    c = f * c_prev + i * g
    return o * np.tanh(c), c


# ---------------------------------------------------------------------------
# full-sequence layer passes with tapes for backprop

def _gru_layer_forward(p: GruLayerParams, X: np.ndarray):
    t_len, _ = X.shape
    h = p.b_r.size
    A_prev = np.zeros((t_len, h))
    R = np.zeros((t_len, h))
    C = np.zeros((t_len, h))
    U = np.zeros((t_len, h))
    states = np.zeros((t_len, h))
    a = np.zeros(h)
    for t in range(t_len):
        z = np.concatenate([a, X[t]])
        r = sigmoid(p.W_r @ z + p.b_r)
        zc = np.concatenate([r * a, X[t]])
        c = np.tanh(p.W_a @ zc + p.b_a)
        u = sigmoid(p.W_u @ z + p.b_u)
        A_prev[t], R[t], C[t], U[t] = a, r, c, u
        a = u * c + (1.0 - u) * a
        states[t] = a
    tape = {"X": X, "A_prev": A_prev, "R": R, "C": C, "U": U}
    return states, tape


def _gru_layer_backward(p: GruLayerParams, tape: dict, d_states: np.ndarray):
    X, A_prev, R, C, U = tape["X"], tape["A_prev"], tape["R"], tape["C"], tape["U"]
    t_len, h = d_states.shape
    dPreR = np.zeros((t_len, h))
    dPreC = np.zeros((t_len, h))
    dPreU = np.zeros((t_len, h))
    dX = np.zeros_like(X)
    da_next = np.zeros(h)
    for t in range(t_len - 1, -1, -1):
        da = d_states[t] + da_next
        a_prev, r, c, u = A_prev[t], R[t], C[t], U[t]
        du = da * (c - a_prev)
        dc = da * u
        da_prev = da * (1.0 - u)
        dpre_u = du * u * (1.0 - u)
        dpre_c = dc * (1.0 - c * c)
        dzc = p.W_a.T @ dpre_c
        dra = dzc[:h]
        dx = dzc[h:]
        dr = dra * a_prev
        da_prev += dra * r
        dpre_r = dr * r * (1.0 - r)
        dz = p.W_u.T @ dpre_u + p.W_r.T @ dpre_r
        da_prev += dz[:h]
        dx += dz[h:]
        dPreR[t], dPreC[t], dPreU[t] = dpre_r, dpre_c, dpre_u
        dX[t] = dx
        da_next = da_prev
    Z = np.concatenate([A_prev, X], axis=1)
    Zc = np.concatenate([R * A_prev, X], axis=1)
    grads = {
        "W_r": dPreR.T @ Z, "b_r": dPreR.sum(axis=0),
        "W_a": dPreC.T @ Zc, "b_a": dPreC.sum(axis=0),
        "W_u": dPreU.T @ Z, "b_u": dPreU.sum(axis=0),
    }
    return grads, dX


def _rnn_layer_forward(p: RnnLayerParams, X: np.ndarray):
    t_len, _ = X.shape
    h = p.b.size
    A_prev = np.zeros((t_len, h))
    states = np.zeros((t_len, h))
    a = np.zeros(h)
    for t in range(t_len):
        A_prev[t] = a
        a = np.tanh(p.W @ np.concatenate([a, X[t]]) + p.b)
        states[t] = a
    return states, {"X": X, "A_prev": A_prev, "states": states}


def _rnn_layer_backward(p: RnnLayerParams, tape: dict, d_states: np.ndarray):
    X, A_prev, states = tape["X"], tape["A_prev"], tape["states"]
    t_len, h = d_states.shape
    dPre = np.zeros((t_len, h))
    dX = np.zeros_like(X)
    da_next = np.zeros(h)
    for t in range(t_len - 1, -1, -1):
        da = d_states[t] + da_next
        dpre = da * (1.0 - states[t] * states[t])
        dz = p.W.T @ dpre
        dPre[t] = dpre
        dX[t] = dz[h:]
        da_next = dz[:h]
    Z = np.concatenate([A_prev, X], axis=1)
    return {"W": dPre.T @ Z, "b": dPre.sum(axis=0)}, dX


def _lstm_layer_forward(p: LstmLayerParams, X: np.ndarray):
    t_len, _ = X.shape
    h = p.b_f.size
    H_prev = np.zeros((t_len, h))
    C_prev = np.zeros((t_len, h))
    F = np.zeros((t_len, h))
    I = np.zeros((t_len, h))
    O = np.zeros((t_len, h))
    G = np.zeros((t_len, h))
    Cs = np.zeros((t_len, h))
    states = np.zeros((t_len, h))
    hv = np.zeros(h)
    cv = np.zeros(h)
    for t in range(t_len):
        z = np.concatenate([hv, X[t]])
        f = sigmoid(p.W_f @ z + p.b_f)
        i = sigmoid(p.W_i @ z + p.b_i)
        o = sigmoid(p.W_o @ z + p.b_o)
        g = np.tanh(p.W_c @ z + p.b_c)
        H_prev[t], C_prev[t] = hv, cv
        cv = f * cv + i * g
        hv = o * np.tanh(cv)
        F[t], I[t], O[t], G[t], Cs[t] = f, i, o, g, cv
        states[t] = hv
    tape = {"X": X, "H_prev": H_prev, "C_prev": C_prev,
            "F": F, "I": I, "O": O, "G": G, "C": Cs}
    return states, tape


def _lstm_layer_backward(p: LstmLayerParams, tape: dict, d_states: np.ndarray):
    X = tape["X"]
    t_len, h = d_states.shape
    dPreF = np.zeros((t_len, h))
    dPreI = np.zeros((t_len, h))
    dPreO = np.zeros((t_len, h))
    dPreG = np.zeros((t_len, h))
    dX = np.zeros_like(X)
    dh_next = np.zeros(h)
    dc_next = np.zeros(h)
    for t in range(t_len - 1, -1, -1):
        dh = d_states[t] + dh_next
        f, i, o, g = tape["F"][t], tape["I"][t], tape["O"][t], tape["G"][t]
        c, c_prev = tape["C"][t], tape["C_prev"][t]
        tc = np.tanh(c)
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        dc_next = dc * f
        dpre_f = df * f * (1.0 - f)
        dpre_i = di * i * (1.0 - i)
        dpre_o = do * o * (1.0 - o)
        dpre_g = dg * (1.0 - g * g)
        dz = p.W_f.T @ dpre_f + p.W_i.T @ dpre_i + p.W_o.T @ dpre_o + p.W_c.T @ dpre_g
        dPreF[t], dPreI[t], dPreO[t], dPreG[t] = dpre_f, dpre_i, dpre_o, dpre_g
        dX[t] = dz[h:]
        dh_next = dz[:h]
    Z = np.concatenate([tape["H_prev"], X], axis=1)
    grads = {
        "W_f": dPreF.T @ Z, "b_f": dPreF.sum(axis=0),
        "W_i": dPreI.T @ Z, "b_i": dPreI.sum(axis=0),
        "W_o": dPreO.T @ Z, "b_o": dPreO.sum(axis=0),
        "W_c": dPreG.T @ Z, "b_c": dPreG.sum(axis=0),
    }
    return grads, dX


_LAYER_FORWARD = {"gru": _gru_layer_forward, "rnn": _rnn_layer_forward,
                  "lstm": _lstm_layer_forward}
_LAYER_BACKWARD = {"gru": _gru_layer_backward, "rnn": _rnn_layer_backward,
                   "lstm": _lstm_layer_backward}


def recurrent_forward(params: ModelParams, X: np.ndarray, training: bool = False,
                      rng: np.random.Generator | None = None):
    """Run the stacked decoder over adjusted features; returns (H, tape).

    Inverted dropout is applied between layers during training only. All layers
    start from a zero state.
    """
    if X.shape[1] != params.config.input_width:
        raise ShapeMismatchError(
            f"feature width {X.shape[1]} != model input width {params.config.input_width}")
    fwd = _LAYER_FORWARD[params.config.cell_type]
    rate = params.config.dropout_rate
    layer_tapes = []
    masks = []
    cur = np.asarray(X, dtype=np.float64)
    states = cur
    for i, layer in enumerate(params.layers):
        states, tape = fwd(layer, cur)
        layer_tapes.append(tape)
        if i < len(params.layers) - 1:
            if training and rate > 0.0:
                if rng is None:
                    raise ValueError("training forward pass needs an rng for dropout")
                mask = (rng.random(states.shape) >= rate) / (1.0 - rate)
            else:
                mask = np.ones_like(states)
            masks.append(mask)
            cur = states * mask
        else:
            cur = states
    tape = {"layers": layer_tapes, "masks": masks, "H": states}
    return states, tape


def gru_forward(params: ModelParams, X: AdjustedFeatures | np.ndarray,
                training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Hidden representation H (one row per mesh frame) from adjusted features."""
    data = X.data if isinstance(X, AdjustedFeatures) else X
    states, _ = recurrent_forward(params, data, training=training, rng=rng)
    return states


def _check_one_hot(v: np.ndarray, what: str) -> int:
    v = np.asarray(v, dtype=np.float64)
    ones = np.flatnonzero(v == 1.0)
    if ones.size != 1 or np.count_nonzero(v) != 1:
        raise InvalidOneHotError(f"{what} vector must have exactly one 1, got {v}")
    return int(ones[0])


def condition_and_project_with_tape(params: ModelParams, H: np.ndarray,
                                    subject_onehot: np.ndarray,
                                    emotion_onehot: np.ndarray,
                                    template: TemplateFace):
    """Fuse identity/emotion embeddings into H and project to vertex offsets."""
    subject_onehot = np.asarray(subject_onehot, dtype=np.float64)
    emotion_onehot = np.asarray(emotion_onehot, dtype=np.float64)
    _check_one_hot(subject_onehot, "subject one-hot")
    _check_one_hot(emotion_onehot, "emotion one-hot")
    if template.num_vertices != params.config.num_vertices:
        raise ShapeMismatchError(
            f"template has {template.num_vertices} vertices, model expects "
            f"{params.config.num_vertices}")
    s = params.cond.W_S @ subject_onehot + params.cond.b_S
    e = params.cond.W_E @ emotion_onehot + params.cond.b_E
    h_tilde = H * (s * e)  # grouped so swapping the two embeddings is bit-exact
    flat = h_tilde @ params.out.W_out.T + params.out.b_out
    frames = flat.reshape(H.shape[0], params.config.num_vertices, 3) + template.vertices
    tape = {"H": H, "S": s, "E": e, "H_tilde": h_tilde,
            "subject_onehot": subject_onehot, "emotion_onehot": emotion_onehot}
    return frames, tape


def condition_and_project(params: ModelParams, H: np.ndarray,
                          subject_onehot: np.ndarray, emotion_onehot: np.ndarray,
                          template: TemplateFace, fps: float = 25.0) -> MeshSequence:
    frames, _ = condition_and_project_with_tape(
        params, H, subject_onehot, emotion_onehot, template)
    return MeshSequence(frames=frames, fps=fps)


def label_onehot(labels: list[str], label: str, what: str) -> np.ndarray:
    if label not in labels:
        raise KeyError(f"unknown {what} {label!r}; known: {sorted(labels)}")
    v = np.zeros(len(labels))
    v[labels.index(label)] = 1.0
    return v


def predict(params: ModelParams, features: FeatureSequence, mesh_fps: float,
            num_frames: int, subject: str, emotion: str,
            template: TemplateFace) -> MeshSequence:
    """Full deterministic inference path: adjust, decode, condition, project."""
    adjusted = input_representation_adjustment(features, mesh_fps, num_frames)
    if adjusted.data.shape[1] != params.config.input_width:
        raise ShapeMismatchError(
            f"adjusted feature width {adjusted.data.shape[1]} != model input width "
            f"{params.config.input_width}; feature width or frame-rate ratio mismatch")
    H = gru_forward(params, adjusted, training=False)
    return condition_and_project(
        params, H,
        label_onehot(params.config.subjects, subject, "subject"),
        label_onehot(params.config.emotions, emotion, "emotion"),
        template, fps=mesh_fps)


# ---------------------------------------------------------------------------
# checkpoint format

def save_checkpoint(params: ModelParams, path, seed: int = 0) -> None:
    tensors = list(params.tensors())
    table = {}
    offset = 0
    payloads = []
    for name, arr in tensors:
        data = arr.astype("<f4").tobytes()
        table[name] = {"shape": list(arr.shape), "offset": offset}
        payloads.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": params.config.to_dict(), "seed": seed, "tensors": table},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for data in payloads:
            fh.write(data)


def load_checkpoint(path) -> tuple[ModelParams, int]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    config = ModelConfig.from_dict(header["config"])
    params = init_params(config, seed=0)
    for name, arr in params.tensors():
        entry = header["tensors"].get(name)
        if entry is None:
            raise FileFormatError(f"{path}: checkpoint missing tensor {name!r}")
        if list(arr.shape) != entry["shape"]:
            raise FileFormatError(
                f"{path}: tensor {name!r} shape {entry['shape']} != expected {list(arr.shape)}")
        start = entry["offset"]
        count = arr.size
        end = start + count * 4
        if end > len(payload):
            raise FileFormatError(
                f"{path}: truncated payload for {name!r}: need {end} bytes, have {len(payload)}")
        arr[...] = np.frombuffer(payload[start:end], dtype="<f4").reshape(arr.shape)
    return params, int(header["seed"])
