"""Manual reverse-mode gradients, Huber loss, Adam, and the per-sequence training loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSequence, input_representation_adjustment
from .mesh import MeshSequence, ShapeMismatchError, TemplateFace
from .model import (
    _LAYER_BACKWARD,
    ModelConfig,
    ModelParams,
    condition_and_project_with_tape,
    init_params,
    label_onehot,
    recurrent_forward,
)


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite during training."""


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    huber_delta: float = 1.0
    dropout_rate: float = 0.3
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.90, 0.05, 0.05)
    hidden_size: int = 256
    num_layers: int = 2
    cell_type: str = "gru"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split_fractions}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "lr": self.lr, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "huber_delta": self.huber_delta,
            "dropout_rate": self.dropout_rate, "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "hidden_size": self.hidden_size, "num_layers": self.num_layers,
            "cell_type": self.cell_type,
        }


@dataclass
class DataItem:
    """One training example: a speech clip paired with its ground-truth scan."""

    features: FeatureSequence
    subject: str
    emotion: str
    template: TemplateFace
    gt: MeshSequence


def huber_loss(pred, gt, delta: float = 1.0):
    """Elementwise Huber loss averaged over all entries; returns (loss, dloss/dpred)."""
    pred_arr = pred.frames if isinstance(pred, MeshSequence) else np.asarray(pred, dtype=np.float64)
    gt_arr = gt.frames if isinstance(gt, MeshSequence) else np.asarray(gt, dtype=np.float64)
    if pred_arr.shape != gt_arr.shape:
        raise ShapeMismatchError(f"shape mismatch: {pred_arr.shape} vs {gt_arr.shape}")
    r = pred_arr - gt_arr
    abs_r = np.abs(r)
    quad = abs_r <= delta
    elem = np.where(quad, 0.5 * r * r, delta * (abs_r - 0.5 * delta))
    n = r.size
    loss = float(elem.sum() / n)
    grad = np.where(quad, r, delta * np.sign(r)) / n
    return loss, grad


def backward(params: ModelParams, forward_tape: dict, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients for every trainable tensor, given the recorded forward tape.

    forward_tape must hold the recurrent tape under "recurrent" and the
    conditioning/projection tape under "head"; loss_grad is d(loss)/d(frames),
    shape (T, V, 3).
    """
    if "recurrent" not in forward_tape or "head" not in forward_tape:
        raise KeyError("forward tape missing 'recurrent' or 'head' records")
    head = forward_tape["head"]
    rec = forward_tape["recurrent"]
    H, s, e, h_tilde = head["H"], head["S"], head["E"], head["H_tilde"]
    t_len = H.shape[0]
    dflat = np.asarray(loss_grad, dtype=np.float64).reshape(t_len, -1)

    grads: dict[str, np.ndarray] = {}
    grads["out.W_out"] = dflat.T @ h_tilde
    grads["out.b_out"] = dflat.sum(axis=0)
    d_h_tilde = dflat @ params.out.W_out
    d_H = d_h_tilde * (s * e)
    d_s = (d_h_tilde * H * e).sum(axis=0)
    d_e = (d_h_tilde * H * s).sum(axis=0)
    grads["cond.W_S"] = np.outer(d_s, head["subject_onehot"])
    grads["cond.b_S"] = d_s
    grads["cond.W_E"] = np.outer(d_e, head["emotion_onehot"])
    grads["cond.b_E"] = d_e

    layer_backward = _LAYER_BACKWARD[params.config.cell_type]
    d_states = d_H
    for i in range(len(params.layers) - 1, -1, -1):
        layer_grads, d_x = layer_backward(params.layers[i], rec["layers"][i], d_states)
        for name, g in layer_grads.items():
            grads[f"layer{i + 1}.{name}"] = g
        if i > 0:
            d_states = d_x * rec["masks"][i - 1]
    return grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr=1e-4, beta1=0.9, beta2=0.999,
                   eps=1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, arr in params.tensors():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(state: AdamState, params: ModelParams,
              grads: dict[str, np.ndarray]) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(
                f"non-finite gradient for {name!r} at step {state.t + 1}")
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for name, arr in params.tensors():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        arr -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return params, state


def split_dataset(items: list, fractions=(0.90, 0.05, 0.05), seed: int = 0) -> dict[str, list]:
    """Seeded shuffle then contiguous split into train/val/test."""
    if not items:
        raise ValueError("cannot split an empty dataset")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    shuffled = [items[i] for i in order]
    n = len(items)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    loss_log: list[tuple[int, float, float]]
    split: dict[str, list]
    config: TrainConfig


def _sequence_loss(params: ModelParams, item: DataItem, adjusted: np.ndarray,
                   subject_onehot: np.ndarray, emotion_onehot: np.ndarray,
                   delta: float, training: bool,
                   rng: np.random.Generator | None):
    H, rec_tape = recurrent_forward(params, adjusted, training=training, rng=rng)
    frames, head_tape = condition_and_project_with_tape(
        params, H, subject_onehot, emotion_onehot, item.template)
    loss, grad = huber_loss(frames, item.gt.frames, delta)
    return loss, grad, {"recurrent": rec_tape, "head": head_tape}


def build_model_config(items: list[DataItem], config: TrainConfig) -> ModelConfig:
    """Model dimensions inferred from the dataset; labels sorted for a stable mapping."""
    first = items[0]
    adjusted = input_representation_adjustment(
        first.features, first.gt.fps, first.gt.num_frames)
    return ModelConfig(
        input_width=adjusted.data.shape[1],
        num_vertices=first.gt.num_vertices,
        subjects=sorted({it.subject for it in items}),
        emotions=sorted({it.emotion for it in items}),
        hidden_size=config.hidden_size,
        num_layers=config.num_layers,
        dropout_rate=config.dropout_rate,
        cell_type=config.cell_type,
    )


def train(items: list[DataItem], config: TrainConfig,
          initial_params: ModelParams | None = None) -> TrainResult:
    """Per-sequence training: forward, Huber loss, backprop through time, Adam.

    Fully deterministic given (items, config, initial_params).
    """
    if not items:
        raise ValueError("empty dataset")
    v0 = items[0].gt.num_vertices
    for it in items:
        if it.gt.num_vertices != v0 or it.template.num_vertices != v0:
            raise ShapeMismatchError("all sequences and templates must share one topology")

    split = split_dataset(items, config.split_fractions, config.seed)
    model_config = build_model_config(items, config)
    params = initial_params if initial_params is not None else init_params(
        model_config, seed=config.seed)

    cache = {}
    for it in items:
        key = id(it)
        adjusted = input_representation_adjustment(it.features, it.gt.fps, it.gt.num_frames)
        if adjusted.data.shape[1] != params.config.input_width:
            raise ShapeMismatchError(
                f"item feature width {adjusted.data.shape[1]} != model input width "
                f"{params.config.input_width}")
        cache[key] = (
            adjusted.data,
            label_onehot(params.config.subjects, it.subject, "subject"),
            label_onehot(params.config.emotions, it.emotion, "emotion"),
        )

    rng = np.random.default_rng(config.seed)
    adam = AdamState.for_params(params, lr=config.lr, beta1=config.beta1,
                                beta2=config.beta2, eps=config.eps)
    loss_log: list[tuple[int, float, float]] = []
    best_params = copy.deepcopy(params)
    best_val = math.inf

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(split["train"]))
        epoch_losses = []
        for idx in order:
            item = split["train"][idx]
            adjusted, sub_oh, emo_oh = cache[id(item)]
            loss, grad, tape = _sequence_loss(
                params, item, adjusted, sub_oh, emo_oh,
                config.huber_delta, training=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            grads = backward(params, tape, grad)
            adam_step(adam, params, grads)
            epoch_losses.append(loss)
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan

        val_losses = []
        for item in split["val"]:
            adjusted, sub_oh, emo_oh = cache[id(item)]
            loss, _, _ = _sequence_loss(params, item, adjusted, sub_oh, emo_oh,
                                        config.huber_delta, training=False, rng=None)
            val_losses.append(loss)
        val_loss = float(np.mean(val_losses)) if val_losses else math.nan

        loss_log.append((epoch, train_loss, val_loss))
        if val_losses and val_loss < best_val:
            best_val = val_loss
            best_params = copy.deepcopy(params)

    if not split["val"] or config.epochs == 0:
        best_params = copy.deepcopy(params)
    return TrainResult(params=params, best_params=best_params, loss_log=loss_log,
                       split=split, config=config)


def write_loss_csv(loss_log: list[tuple[int, float, float]], path) -> None:
    lines = ["epoch,train_loss,val_loss"]
    for epoch, train_loss, val_loss in loss_log:
        val = "" if math.isnan(val_loss) else repr(val_loss)
        lines.append(f"{epoch},{repr(train_loss)},{val}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
