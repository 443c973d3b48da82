"""Command-line entry point: preprocess, train, predict, evaluate, diff, ablate,
gen-synthetic."""

from __future__ import annotations

import argparse
import json
import struct
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import MANIFEST_NAME, load_dataset, save_dataset
from .features import FrameRateError, load_features
from .mesh import (
    DegenerateAxisError,
    FileFormatError,
    MeshSequence,
    ShapeMismatchError,
    compute_normalization_stats,
    denormalize_sequence,
    load_mesh_sequence,
    load_stats,
    load_template,
    mean_face_vertex_error,
    normalize_sequence,
    normalize_template,
    save_mesh_sequence,
    save_stats,
    save_template,
    vertex_difference_heatmap,
)
from .model import InvalidOneHotError, load_checkpoint, predict, save_checkpoint
from .synthetic import SyntheticSpec, generate
from .training import (
    TrainConfig,
    TrainingDivergedError,
    train,
    write_loss_csv,
)

HMV_MAGIC = b"HMV1"

_ERROR_CODES = [
    (FileFormatError, "E_BAD_FORMAT"),
    (DegenerateAxisError, "E_DEGENERATE_AXIS"),
    (ShapeMismatchError, "E_SHAPE_MISMATCH"),
    (FrameRateError, "E_FRAME_RATE"),
    (InvalidOneHotError, "E_BAD_ONEHOT"),
    (TrainingDivergedError, "E_DIVERGED"),
    (FileNotFoundError, "E_MISSING_FILE"),
    (KeyError, "E_UNKNOWN_LABEL"),
    (ValueError, "E_INVALID_VALUE"),
]


class CliError(Exception):
    def __init__(self, code: str, detail: str):
        super().__init__(detail)
        self.code = code


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError("E_MISSING_FILE", f"config file not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def _config_from(cls, file_values: dict, **overrides):
    allowed = {f.name for f in fields(cls)}
    values = {k: v for k, v in file_values.items() if k in allowed}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "split_fractions" in values:
        values["split_fractions"] = tuple(values["split_fractions"])
    return cls(**values)


def _write_run_manifest(out_dir: Path, command: str, config: dict, inputs: list[str],
                        seed: int) -> None:
    manifest = {
        "tool": "speechface",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_synthetic(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _config_from(
        SyntheticSpec, file_values,
        num_vertices=args.vertices, frames_per_sequence=args.frames,
        num_sequences=args.sequences, num_subjects=args.subjects,
        feature_width=args.feature_width, feature_fps=args.feature_fps,
        mesh_fps=args.mesh_fps, emotion_effect_scale=args.emotion_scale,
        seed=args.seed)
    items, _ = generate(spec)
    out_dir = Path(args.out)
    manifest_path = save_dataset(items, out_dir)
    _write_run_manifest(out_dir, "gen-synthetic", spec.__dict__ | {}, [], spec.seed)
    print(f"wrote {len(items)} sequences to {manifest_path.parent}")
    return 0


def cmd_preprocess(args) -> int:
    raw_dir = Path(args.raw)
    tpl_dir = Path(args.templates) if args.templates else raw_dir
    out_dir = Path(args.out)
    if not raw_dir.is_dir():
        raise CliError("E_MISSING_FILE", f"raw mesh directory not found: {raw_dir}")

    manifest_path = raw_dir / MANIFEST_NAME
    if manifest_path.exists():
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))["items"]
    else:
        msq_files = sorted(raw_dir.glob("*__*.msq"))
        if not msq_files:
            raise CliError(
                "E_MISSING_FILE",
                f"no manifest.json and no <subject>__<name>.msq files in {raw_dir}; "
                "expected a dataset manifest or subject-prefixed mesh sequences")
        entries = []
        for p in msq_files:
            subject = p.name.split("__", 1)[0]
            entry = {"mesh_path": p.name, "template_path": f"{subject}.tpl",
                     "subject": subject, "emotion": "neutral"}
            sft = p.with_suffix(".sft")
            if sft.exists():
                entry["features_path"] = sft.name
            entries.append(entry)

    out_dir.mkdir(parents=True, exist_ok=True)
    stats_by_subject = {}
    for entry in entries:
        subject = entry["subject"]
        if subject in stats_by_subject:
            continue
        tpl_path = tpl_dir / entry["template_path"]
        if not tpl_path.exists():
            raise CliError("E_MISSING_FILE",
                           f"missing neutral template for subject {subject!r}: {tpl_path}")
        tpl = load_template(tpl_path, subject_id=subject)
        stats = compute_normalization_stats(tpl)
        stats_by_subject[subject] = stats
        save_template(normalize_template(tpl, stats), out_dir / tpl_path.name)
        save_stats(stats, out_dir / f"{subject}.stats.json")

    out_entries = []
    for entry in entries:
        stats = stats_by_subject[entry["subject"]]
        seq = load_mesh_sequence(raw_dir / entry["mesh_path"])
        save_mesh_sequence(normalize_sequence(seq, stats), out_dir / entry["mesh_path"])
        out_entry = dict(entry)
        if "features_path" in entry:
            src = raw_dir / entry["features_path"]
            (out_dir / entry["features_path"]).write_bytes(src.read_bytes())
        out_entries.append(out_entry)

    (out_dir / MANIFEST_NAME).write_text(
        json.dumps({"items": out_entries}, indent=2), encoding="utf-8")
    _write_run_manifest(out_dir, "preprocess", {}, [str(raw_dir), str(tpl_dir)],
                        args.seed or 0)
    print(f"normalized {len(out_entries)} sequences for "
          f"{len(stats_by_subject)} subjects into {out_dir}")
    return 0


def cmd_train(args) -> int:
    file_values = _load_config_file(args.config)
    config = _config_from(
        TrainConfig, file_values,
        epochs=args.epochs, lr=args.lr, seed=args.seed,
        hidden_size=args.hidden, cell_type=args.cell,
        huber_delta=args.huber_delta, dropout_rate=args.dropout)
    items = load_dataset(args.data)
    result = train(items, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out_dir / "model.ckpt", seed=config.seed)
    save_checkpoint(result.best_params, out_dir / "best.ckpt", seed=config.seed)
    write_loss_csv(result.loss_log, out_dir / "loss.csv")
    _write_run_manifest(out_dir, "train", config.to_dict(), [str(args.data)], config.seed)
    if result.loss_log:
        print(f"trained {config.epochs} epochs; final train loss "
              f"{result.loss_log[-1][1]:.6g}")
    else:
        print("trained 0 epochs; wrote initial checkpoint")
    return 0


def cmd_predict(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    features = load_features(args.features)
    template = load_template(args.template)
    if args.frames is not None:
        num_frames = args.frames
        mesh_fps = args.fps if args.fps else features.fps / 2.0
    elif args.fps:
        mesh_fps = args.fps
        num_frames = max(1, round(features.num_frames * mesh_fps / features.fps))
    else:
        raise CliError("E_INVALID_VALUE", "need --frames or --fps to fix the output length")
    out = predict(params, features, mesh_fps, num_frames,
                  args.subject, args.emotion, template)
    save_mesh_sequence(out, args.out)
    print(f"wrote {out.num_frames} predicted frames to {args.out}")
    return 0


def _stats_for(stats_path: Path, name: str):
    if stats_path.is_dir():
        subject = name.split("__", 1)[0]
        p = stats_path / f"{subject}.stats.json"
        if not p.exists():
            raise CliError("E_MISSING_FILE", f"no stats file for subject {subject!r}: {p}")
        return load_stats(p)
    return load_stats(stats_path)


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    stats_path = Path(args.stats) if args.stats else None
    names = sorted(p.name for p in pred_dir.glob("*.msq"))
    if not names:
        raise CliError("E_MISSING_FILE", f"no .msq files in {pred_dir}")
    preds, gts = [], []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise CliError("E_MISSING_FILE", f"no ground-truth match for {name} in {gt_dir}")
        p = load_mesh_sequence(pred_dir / name)
        g = load_mesh_sequence(gt_path)
        if stats_path is not None:
            stats = _stats_for(stats_path, name)
            p = denormalize_sequence(p, stats)
            g = denormalize_sequence(g, stats)
        preds.append(p)
        gts.append(g)
        print(f"{name}: {mean_face_vertex_error(p, g):.6g}")
    print(f"mean_face_vertex_error: {mean_face_vertex_error(preds, gts):.6g}")
    return 0


def cmd_diff(args) -> int:
    seq_a = load_mesh_sequence(args.a)
    seq_b = load_mesh_sequence(args.b)
    frame_a = seq_a.frames[args.frame_a]
    frame_b = seq_b.frames[args.frame_b]
    heat = vertex_difference_heatmap(frame_a, frame_b)
    with open(args.out, "wb") as fh:
        fh.write(HMV_MAGIC)
        fh.write(struct.pack("<I", heat.size))
        fh.write(heat.astype("<f4").tobytes())
    print(f"wrote {heat.size} per-vertex values to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    items = load_dataset(args.data)
    file_values = _load_config_file(args.config)
    cells = args.cells.split(",")
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = []
    for cell in cells:
        for hidden in sizes:
            config = _config_from(TrainConfig, file_values, epochs=args.epochs,
                                  lr=args.lr, seed=args.seed, hidden_size=hidden,
                                  cell_type=cell)
            start = time.perf_counter()
            result = train(items, config)
            elapsed = time.perf_counter() - start
            eval_items = result.split["test"] or result.split["train"]
            preds = [predict(result.params, it.features, it.gt.fps, it.gt.num_frames,
                             it.subject, it.emotion, it.template) for it in eval_items]
            err = mean_face_vertex_error(preds, [it.gt for it in eval_items])
            final_loss = result.loss_log[-1][1] if result.loss_log else float("nan")
            rows.append((cell, hidden, final_loss, err, elapsed))
            print(f"{cell}-{hidden}: vertex_error={err:.6g} "
                  f"final_loss={final_loss:.6g} time={elapsed:.1f}s")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["cell,hidden,final_train_loss,vertex_error,seconds"]
    for cell, hidden, loss, err, secs in rows:
        lines.append(f"{cell},{hidden},{repr(loss)},{repr(err)},{secs:.3f}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_run_manifest(out_dir, "ablate", {"cells": cells, "sizes": sizes},
                        [str(args.data)], args.seed or 0)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechface",
        description="Speech-driven 3D facial animation: training and inference engine")

    def add_common(p):
        p.add_argument("--seed", type=int, default=None, help="master RNG seed")
        p.add_argument("--config", default=None, help="JSON config file")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--vertices", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--sequences", type=int, default=None)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--feature-width", type=int, default=None)
    p.add_argument("--feature-fps", type=float, default=None)
    p.add_argument("--mesh-fps", type=float, default=None)
    p.add_argument("--emotion-scale", type=float, default=None)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="normalize meshes per subject")
    add_common(p)
    p.add_argument("--raw", required=True, help="directory of raw mesh sequences")
    p.add_argument("--templates", default=None,
                   help="directory of neutral templates (defaults to --raw)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the vertex decoder")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest or its directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--cell", choices=["gru", "rnn", "lstm"], default=None)
    p.add_argument("--huber-delta", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="synthesize a mesh sequence from features")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--emotion", default="neutral")
    p.add_argument("--template", required=True)
    p.add_argument("--frames", type=int, default=None, help="output frame count")
    p.add_argument("--fps", type=float, default=None, help="output frame rate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="mean face vertex error between two mesh dirs")
    add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--stats", default=None,
                   help="stats JSON file or directory of <subject>.stats.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diff", help="per-vertex difference heatmap between two frames")
    add_common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--frame-a", type=int, default=0)
    p.add_argument("--frame-b", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("ablate", help="train and compare decoder cell variants")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cells", default="gru,rnn,lstm")
    p.add_argument("--sizes", default="256")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - map to stable error codes at the boundary
        for klass, code in _ERROR_CODES:
            if isinstance(exc, klass):
                detail = exc.args[0] if exc.args else str(exc)
                print(f"{code}: {detail}", file=sys.stderr)
                return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
