"""owlkit-extract: image folder -> features/labels/manifest for the engine.

Exit codes: 0 success, 2 usage/config error (unknown backbone or split),
3 data/IO error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backbones import REGISTRY, build
from .extract import ROLES, run_extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owlkit-extract",
        description="Run a pretrained backbone over a class-subfolder image "
        "directory and emit NPY features + labels + manifest.",
    )
    parser.add_argument("--images", required=True, help="directory of class subfolders")
    parser.add_argument(
        "--backbone", required=True,
        help=f"one of: {', '.join(sorted(REGISTRY))}",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--split", default="base-train", help=f"one of {ROLES}")
    parser.add_argument("--session-index", type=int, default=None)
    parser.add_argument("--normalize", action="store_true", help="L2-normalize rows")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--dataset", default=None, help="dataset name in the manifest")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.backbone not in REGISTRY:
        print(
            f"error: unknown backbone {args.backbone!r}; "
            f"choose from {', '.join(sorted(REGISTRY))}",
            file=sys.stderr,
        )
        return 2
    if args.split not in ROLES:
        print(f"error: unknown split {args.split!r}; choose from {ROLES}", file=sys.stderr)
        return 2
    images = Path(args.images)
    if not images.is_dir():
        print(f"error: --images {images} is not a directory", file=sys.stderr)
        return 3
    try:
        backbone = build(args.backbone)
        result = run_extract(
            images_dir=images,
            backbone=backbone,
            out_dir=Path(args.out),
            split=args.split,
            session_index=args.session_index,
            normalize=args.normalize,
            batch_size=args.batch_size,
            dataset=args.dataset,
        )
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(
        f"{result.n_images} images -> {result.feature_path} "
        f"({result.n_images}x{result.dim}), {len(result.classes)} classes"
        + (f", {len(result.skipped)} skipped" if result.skipped else "")
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
