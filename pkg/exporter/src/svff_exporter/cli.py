"""Command-line entry point: svff-export DATASET_ROOT [-o OUT] [--backbone ID]."""

import argparse
import sys

from .backbones import DEFAULT_BACKBONE
from .errors import ExportError
from .export import ExportManifest, export

EXIT_OK = 0
EXIT_ERROR = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svff-export",
        description="Embed an image-folder dataset and write SVFF features.",
    )
    parser.add_argument("dataset_root", help="folder with one subdirectory per class")
    parser.add_argument(
        "-o", "--out", default="features.svff", help="output SVFF path"
    )
    parser.add_argument(
        "--backbone",
        default=DEFAULT_BACKBONE,
        help="backbone identifier, e.g. seeded-projection:64 or torchvision:vit_b_16",
    )
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = ExportManifest(
        dataset_root=args.dataset_root,
        output=args.out,
        backbone=args.backbone,
        image_size=args.image_size,
    )
    try:
        result = export(manifest)
    except (ExportError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.verbose:
        print(f"wrote {result.output}", file=sys.stderr)
        print(f"wrote {result.mapping_path}", file=sys.stderr)
    print(
        f"n_samples={result.n_samples} dim={result.dim} "
        f"n_classes={result.n_classes} skipped={len(result.skipped)}"
    )
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
