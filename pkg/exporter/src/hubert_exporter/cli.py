"""Command line entry point: hubert-export --in a.wav b.wav --out dir/"""

import argparse
import sys
from pathlib import Path

from .export import (DEFAULT_MODEL_ID, AudioReadError, ExportJob,
                     ModelLoadError, export)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hubert-export",
        description="Export frozen HuBERT speech features to .sft files.")
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   type=Path, help="input WAV files")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--model-id", default=DEFAULT_MODEL_ID)
    p.add_argument("--model-path", type=Path, default=None,
                   help="local directory with pretrained weights")
    p.add_argument("--random-init-seed", type=int, default=None,
                   help="fall back to a seeded random-init model when "
                        "pretrained weights are unreachable")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(inputs=args.inputs, out_dir=args.out,
                    model_id=args.model_id, model_path=args.model_path,
                    random_init_seed=args.random_init_seed)
    try:
        written = export(job)
    except (AudioReadError, ModelLoadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
