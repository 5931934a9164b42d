"""Command line: extract features to RCF1 and convert Karpathy splits.

Exit codes: 0 success, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import sys

from rcfextract.extract import extract_directory
from rcfextract.splits import SplitFormatError, convert_karpathy, write_manifest


def _parse_grid(value: str) -> int:
    """Accept '7x7' (or a bare '7') and return G."""
    parts = value.lower().split("x")
    try:
        sides = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {value!r}; use e.g. 7x7")
    if len(sides) == 2 and sides[0] != sides[1]:
        raise argparse.ArgumentTypeError("grid must be square, e.g. 7x7")
    if sides[0] < 1:
        raise argparse.ArgumentTypeError("grid must be >= 1")
    return sides[0]


def cmd_extract(args) -> int:
    summary = extract_directory(
        args.images, args.out, grid=args.grid, size=args.size,
        weights=args.weights,
        log_fn=(lambda obj: print(json.dumps(obj))) if args.verbose else None)
    print(json.dumps({"event": "done", "out": str(args.out), **summary}))
    return 0


def cmd_convert_splits(args) -> int:
    entries, counts = convert_karpathy(args.karpathy)
    write_manifest(entries, args.out)
    print(json.dumps({"event": "converted", "out": str(args.out),
                      "counts": counts}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcf-extract",
        description="Emit RCF1 feature files from images with ResNet-101.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract features from an image directory")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=_parse_grid, default=7, metavar="GxG")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--weights", choices=("pretrained", "none"),
                   default="pretrained",
                   help="'none' uses a randomly initialized backbone "
                        "(for offline smoke tests)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("convert-splits",
                       help="convert a Karpathy split JSON to a caption manifest")
    p.add_argument("--karpathy", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_splits)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SplitFormatError, ValueError, OSError) as exc:
        print(json.dumps({"event": "error", "detail": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
